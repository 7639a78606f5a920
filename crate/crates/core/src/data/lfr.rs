use crate::diff::Tensor;
use crate::scalar::Scalar;

/// Low-frame-rate stacking.
///
/// Output frame `k` is anchored at raw frame `a = k · decimation` and
/// concatenates raw frames `a − left_context ..= a`, oldest first. Indices
/// below zero replicate frame 0. Produces `⌈T / decimation⌉` frames of width
/// `F · (left_context + 1)`.
pub fn stack_lfr<S: Scalar>(frames: &Tensor<S>, left_context: usize, decimation: usize) -> Tensor<S> {
    assert!(decimation >= 1, "decimation must be positive");
    let (t_raw, f) = (frames.rows(), frames.cols());
    let out_rows = t_raw.div_ceil(decimation);
    let width = f * (left_context + 1);
    let mut data = Vec::with_capacity(out_rows * width);
    for k in 0..out_rows {
        let anchor = k * decimation;
        for back in (0..=left_context).rev() {
            data.extend_from_slice(frames.row(anchor.saturating_sub(back)));
        }
    }
    Tensor::new(vec![out_rows, width], data).expect("stacked shape is consistent")
}
