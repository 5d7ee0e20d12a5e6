use std::fmt::Write as _;

use crate::graphmodel::CounterFrame;
use crate::model::Task;
use crate::numerics::Tensor;

/// Plain-text predictions: a header, then per frame a `# frame` line and one
/// row per edge (three class probabilities) or super-segment (one speed).
/// Values use shortest round-trip formatting, so files diff cleanly.
pub fn write_predictions(task: Task, frames: &[&CounterFrame], preds: &[Tensor]) -> String {
    let mut out = String::new();
    let rows = preds.first().map_or(0, Tensor::rows);
    let _ = writeln!(out, "# task {task} frames {} rows {rows}", preds.len());
    for (i, (f, p)) in frames.iter().zip(preds).enumerate() {
        let _ = writeln!(
            out,
            "# frame {i} weekday {} slot {}",
            f.time.weekday, f.time.slot
        );
        for r in 0..p.rows() {
            let row: Vec<String> = p.row(r).iter().map(f64::to_string).collect();
            let _ = writeln!(out, "{}", row.join(" "));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graphmodel::TimeSlot;

    #[test]
    fn layout() {
        let f = CounterFrame::new(Tensor::zeros(1, 4), TimeSlot::new(2, 31).unwrap()).unwrap();
        let p = Tensor::from_rows(&[vec![0.25, 0.25, 0.5], vec![0.1, 0.2, 0.7]]).unwrap();
        let text = write_predictions(Task::Congestion, &[&f], &[p]);
        assert_eq!(
            text,
            "# task congestion frames 1 rows 2\n# frame 0 weekday 2 slot 31\n0.25 0.25 0.5\n0.1 0.2 0.7\n"
        );
    }
}
