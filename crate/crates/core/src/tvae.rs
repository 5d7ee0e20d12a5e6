//! Transposed variational auto-encoder for missing counter reconstruction.
//!
//! The counter matrix is transposed so that each of the four time bins is
//! one sample over all nodes. Missing nodes then sit in different input
//! positions and get distinct reconstructions, unlike a per-node VAE where
//! every missing node sees the same filled input.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::graphmodel::BINS;
use crate::nn::{Linear, Noise, ParamSet, Session, LEAKY_SLOPE};
use crate::numerics::{Tensor, Var};

/// Range of the per-sample input scale used for augmentation.
pub const NOISE_RANGE: (f64, f64) = (0.8, 1.2);

/// Which axis forms a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReconLayout {
    /// Rows of `Xᵀ`: 4 samples of width `|V|`.
    Transposed,
    /// Rows of `X`: `|V|` samples of width 4. Baseline only.
    PerNode,
}

impl ReconLayout {
    pub fn name(self) -> &'static str {
        match self {
            ReconLayout::Transposed => "transposed",
            ReconLayout::PerNode => "per_node",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "transposed" => Ok(ReconLayout::Transposed),
            "per_node" => Ok(ReconLayout::PerNode),
            _ => Err(Error::Config(format!(
                "unknown reconstruction layout `{s}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TvaeConfig {
    pub hidden: usize,
    pub latent: usize,
    pub layout: ReconLayout,
}

/// Encoder `width → hidden → 2·latent`, decoder `latent → hidden → width`.
#[derive(Clone, Debug)]
pub struct Tvae {
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
    cfg: TvaeConfig,
}

/// Forward result, all on the session tape.
pub struct TvaeOutput {
    /// Decoder output in unit range, `|V|×4`.
    pub recon_unit: Var,
    /// Gaussian KL summed over samples.
    pub kl: Var,
}

impl Tvae {
    pub fn new(
        params: &mut ParamSet,
        num_nodes: usize,
        cfg: TvaeConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if cfg.hidden == 0 || cfg.latent == 0 {
            return Err(Error::Config("TVAE widths must be positive".into()));
        }
        let width = match cfg.layout {
            ReconLayout::Transposed => num_nodes,
            ReconLayout::PerNode => BINS,
        };
        Ok(Self {
            enc1: Linear::new(params, "tvae.enc1", width, cfg.hidden, rng)?,
            enc2: Linear::new(params, "tvae.enc2", cfg.hidden, 2 * cfg.latent, rng)?,
            dec1: Linear::new(params, "tvae.dec1", cfg.latent, cfg.hidden, rng)?,
            dec2: Linear::new(params, "tvae.dec2", cfg.hidden, width, rng)?,
            cfg,
        })
    }

    pub fn config(&self) -> TvaeConfig {
        self.cfg
    }

    /// Reconstructs a unit-range `|V|×4` input. Training samples the latent
    /// with the reparameterization trick; eval uses the mean.
    pub fn forward(&self, s: &mut Session, x_unit: Var, noise: &mut Noise) -> Result<TvaeOutput> {
        let samples = match self.cfg.layout {
            ReconLayout::Transposed => s.tape.transpose(x_unit),
            ReconLayout::PerNode => x_unit,
        };
        let h = self.enc1.forward(s, samples)?;
        let h = s.tape.leaky_relu(h, LEAKY_SLOPE);
        let stats = self.enc2.forward(s, h)?;
        let z = self.cfg.latent;
        let mu = s.tape.slice_cols(stats, 0, z)?;
        let logvar = s.tape.slice_cols(stats, z, 2 * z)?;

        let latent = if noise.training {
            let rows = s.value(mu).rows();
            let mut rng = ChaCha8Rng::seed_from_u64(noise.next_seed());
            let eps = Tensor::from_fn(rows, z, |_, _| rng.sample(StandardNormal));
            let eps = s.tape.constant(eps);
            let half = s.tape.scale(logvar, 0.5);
            let sigma = s.tape.exp(half);
            let jitter = s.tape.mul(sigma, eps)?;
            s.tape.add(mu, jitter)?
        } else {
            mu
        };

        let d = self.dec1.forward(s, latent)?;
        let d = s.tape.leaky_relu(d, LEAKY_SLOPE);
        let out = self.dec2.forward(s, d)?;
        let out = s.tape.sigmoid(out);
        let recon_unit = match self.cfg.layout {
            ReconLayout::Transposed => s.tape.transpose(out),
            ReconLayout::PerNode => out,
        };

        // KL(q || N(0, I)) = -1/2 Σ (1 + log σ² − μ² − σ²)
        let mu2 = s.tape.square(mu);
        let var = s.tape.exp(logvar);
        let t = s.tape.add_scalar(logvar, 1.0);
        let t = s.tape.sub(t, mu2)?;
        let t = s.tape.sub(t, var)?;
        let total = s.tape.sum(t);
        let kl = s.tape.scale(total, -0.5);

        if !s.value(recon_unit).is_finite() {
            return Err(Error::Numeric {
                location: "tvae.dec2".into(),
                detail: "non-finite reconstruction".into(),
            });
        }
        Ok(TvaeOutput { recon_unit, kl })
    }
}

/// Scales the whole input by one factor drawn from [`NOISE_RANGE`] in
/// training; identity in eval. Returns the factor used.
pub fn noise_augment(x_unit: &Tensor, training: bool, seed: u64) -> (Tensor, f64) {
    if !training {
        return (x_unit.clone(), 1.0);
    }
    let factor = ChaCha8Rng::seed_from_u64(seed).gen_range(NOISE_RANGE.0..=NOISE_RANGE.1);
    (x_unit.scale(factor), factor)
}

/// `M ⊙ X + (1 − M) ⊙ recon`, as a select so observed cells are bit-exact.
pub fn masked_merge(x: &Tensor, mask: &Tensor, recon: &Tensor) -> Result<Tensor> {
    x.expect_same_shape(mask, "masked_merge")?;
    x.zip_map(recon, "masked_merge", |_, r| r).map(|mut out| {
        for ((o, &xv), &m) in out.data_mut().iter_mut().zip(x.data()).zip(mask.data()) {
            if m != 0.0 {
                *o = xv;
            }
        }
        out
    })
}

/// Mean squared error over observed cells (`mask == 1`).
pub fn loss_reconstruction(recon: &Tensor, x: &Tensor, mask: &Tensor) -> Result<f64> {
    recon.expect_same_shape(x, "loss_reconstruction")?;
    recon.expect_same_shape(mask, "loss_reconstruction")?;
    let (mut n, mut total) = (0usize, 0.0);
    for ((r, v), m) in recon.data().iter().zip(x.data()).zip(mask.data()) {
        if *m != 0.0 {
            n += 1;
            total += (r - v).powi(2);
        }
    }
    if n == 0 {
        return Err(Error::Invalid(
            "reconstruction loss needs an observed cell".into(),
        ));
    }
    Ok(total / n as f64)
}

/// Tape version of [`loss_reconstruction`].
pub fn loss_reconstruction_var(
    s: &mut Session,
    recon: Var,
    x: &Tensor,
    mask: &Tensor,
) -> Result<Var> {
    let observed = mask.data().iter().filter(|&&m| m != 0.0).count();
    if observed == 0 {
        return Err(Error::Invalid(
            "reconstruction loss needs an observed cell".into(),
        ));
    }
    let target = s.tape.constant(x.clone());
    let m = s.tape.constant(mask.clone());
    let diff = s.tape.sub(recon, target)?;
    let sq = s.tape.square(diff);
    let masked = s.tape.mul(sq, m)?;
    let total = s.tape.sum(masked);
    Ok(s.tape.scale(total, 1.0 / observed as f64))
}

/// Result of running the full reconstruction path on one frame.
pub struct Reconstruction {
    /// Merged features `U_d` in normalized units.
    pub u_d: Var,
    /// Raw decoder output restored to normalized units (pre-merge).
    pub recon: Var,
    pub kl: Var,
    /// Unit-range input actually fed to the model (after noise).
    pub recon_input: Tensor,
}

/// Min-max scale, optional noise, reconstruct, restore, merge.
pub fn reconstruct(
    tvae: &Tvae,
    s: &mut Session,
    x_hat: &Tensor,
    mask: &Tensor,
    range: (f64, f64),
    use_noise: bool,
    noise: &mut Noise,
) -> Result<Reconstruction> {
    let (lo, hi) = range;
    let unit = crate::preprocess::minmax_to_unit(x_hat, lo, hi)?;
    let seed = noise.next_seed();
    let (fed, _) = noise_augment(&unit, noise.training && use_noise, seed);
    let input = s.tape.constant(fed.clone());
    let out = tvae.forward(s, input, noise)?;
    let scaled = s.tape.scale(out.recon_unit, hi - lo);
    let recon = s.tape.add_scalar(scaled, lo);
    let observed = s.tape.constant(x_hat.clone());
    let u_d = s.tape.masked_merge(mask, observed, recon)?;
    Ok(Reconstruction {
        u_d,
        recon,
        kl: out.kl,
        recon_input: fed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_difference, max_relative_error};
    use proptest::prelude::*;

    fn build(nodes: usize, layout: ReconLayout, seed: u64) -> (ParamSet, Tvae) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamSet::new();
        let cfg = TvaeConfig {
            hidden: 6,
            latent: 3,
            layout,
        };
        let t = Tvae::new(&mut p, nodes, cfg, &mut rng).unwrap();
        (p, t)
    }

    #[test]
    fn noise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::uniform(5, 4, 0.0, 1.0, &mut rng);
        assert_eq!(noise_augment(&x, false, 3).0, x);
        let (a, fa) = noise_augment(&x, true, 3);
        let (b, fb) = noise_augment(&x, true, 3);
        assert_eq!((a, fa), (b, fb));
        assert!((0.8..=1.2).contains(&fa));
        let z = Tensor::zeros(5, 4);
        assert_eq!(noise_augment(&z, true, 9).0, z);
    }

    #[test]
    fn merge_cases() {
        let x = Tensor::from_rows(&[vec![5.0, f64::NAN]]).unwrap();
        let m = Tensor::from_rows(&[vec![1.0, 0.0]]).unwrap();
        let r = Tensor::from_rows(&[vec![9.0, 7.0]]).unwrap();
        assert_eq!(masked_merge(&x, &m, &r).unwrap().data(), &[5.0, 7.0]);
        let x = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        assert_eq!(masked_merge(&x, &Tensor::ones(1, 2), &r).unwrap(), x);
        assert_eq!(masked_merge(&x, &Tensor::zeros(1, 2), &r).unwrap(), r);
        assert!(masked_merge(&x, &Tensor::ones(2, 1), &r).is_err());
    }

    #[test]
    fn reconstruction_loss_cases() {
        let x = Tensor::from_rows(&[vec![1.0, 2.0, 0.0]]).unwrap();
        assert_eq!(
            loss_reconstruction(&x, &x, &Tensor::ones(1, 3)).unwrap(),
            0.0
        );
        let recon = Tensor::from_rows(&[vec![3.0, 100.0, 0.0]]).unwrap();
        let one = Tensor::from_rows(&[vec![1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(loss_reconstruction(&recon, &x, &one).unwrap(), 4.0);
        let recon = Tensor::from_rows(&[vec![2.0, 5.0, 0.0]]).unwrap();
        let two = Tensor::from_rows(&[vec![1.0, 1.0, 0.0]]).unwrap();
        assert_eq!(loss_reconstruction(&recon, &x, &two).unwrap(), 5.0);
        assert!(loss_reconstruction(&recon, &x, &Tensor::zeros(1, 3)).is_err());
    }

    #[test]
    fn eval_is_deterministic_and_shaped() {
        let (p, t) = build(7, ReconLayout::Transposed, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = Tensor::uniform(7, 4, 0.0, 1.0, &mut rng);
        let run = || {
            let mut s = Session::frozen(&p);
            let xv = s.tape.constant(x.clone());
            let out = t.forward(&mut s, xv, &mut Noise::eval()).unwrap();
            s.value(out.recon_unit).clone()
        };
        let a = run();
        assert_eq!(a.shape(), [7, 4]);
        assert_eq!(a, run());
    }

    #[test]
    fn per_node_layout_repeats_identical_rows() {
        let (p, t) = build(6, ReconLayout::PerNode, 4);
        let mut x = Tensor::uniform(6, 4, 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(1));
        for c in 0..4 {
            x.set(2, c, 0.0);
            x.set(4, c, 0.0);
        }
        let mut s = Session::frozen(&p);
        let xv = s.tape.constant(x.clone());
        let out = t.forward(&mut s, xv, &mut Noise::eval()).unwrap();
        let y = s.value(out.recon_unit);
        assert_eq!(y.row(2), y.row(4));

        let (p, t) = build(6, ReconLayout::Transposed, 4);
        let mut s = Session::frozen(&p);
        let xv = s.tape.constant(x);
        let out = t.forward(&mut s, xv, &mut Noise::eval()).unwrap();
        let y = s.value(out.recon_unit);
        assert_ne!(y.row(2), y.row(4));
    }

    #[test]
    fn gradient_of_recon_plus_kl_matches_finite_differences() {
        for seed in 0..20 {
            let (p, t) = build(5, ReconLayout::Transposed, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let x_hat = Tensor::uniform(5, 4, -1.0, 3.0, &mut rng);
            let mask = Tensor::from_fn(5, 4, |i, _| if i % 2 == 0 { 1.0 } else { 0.0 });
            let beta = 0.3;
            let loss_of = |params: &ParamSet, grads: bool| {
                let mut s = if grads {
                    Session::trainable(params)
                } else {
                    Session::frozen(params)
                };
                // Fixed training seed: same ε every evaluation.
                let mut noise = Noise::train(seed);
                let r =
                    reconstruct(&t, &mut s, &x_hat, &mask, (-1.0, 3.0), true, &mut noise).unwrap();
                let lr = loss_reconstruction_var(&mut s, r.recon, &x_hat, &mask).unwrap();
                let kl = s.tape.scale(r.kl, beta);
                let loss = s.tape.add(lr, kl).unwrap();
                (s, loss)
            };
            let (s, loss) = loss_of(&p, true);
            let analytic = s.param_grads(loss).unwrap();
            let numeric = finite_difference(p.tensors(), 1e-5, |ts| {
                let mut q = p.clone();
                q.assign(ts.to_vec()).unwrap();
                let (s, l) = loss_of(&q, false);
                s.value(l).item().unwrap()
            });
            let err = max_relative_error(&analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    proptest! {
        #[test]
        fn merge_is_bit_exact(
            vals in proptest::collection::vec((any::<f64>(), any::<bool>(), any::<f64>()), 1..64),
        ) {
            let n = vals.len();
            let x = Tensor::new(1, n, vals.iter().map(|v| v.0).collect()).unwrap();
            let m = Tensor::new(1, n, vals.iter().map(|v| f64::from(u8::from(v.1))).collect()).unwrap();
            let r = Tensor::new(1, n, vals.iter().map(|v| v.2).collect()).unwrap();
            let out = masked_merge(&x, &m, &r).unwrap();
            for i in 0..n {
                let want = if vals[i].1 { vals[i].0 } else { vals[i].2 };
                prop_assert_eq!(out.data()[i].to_bits(), want.to_bits());
            }
        }
    }
}
