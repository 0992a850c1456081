use rand::Rng;

use crate::embedding::{AudioEmbedding, Embedding, EMBEDDING_DIM};
use crate::error::{ensure, Error, Result};
use crate::frontend::{LogMelSegment, N_MELS};
use crate::nd::{BoundParams, Graph, ParamSet, Real, Tensor, Var};

/// Conv widths of the five conv/pool stages.
pub const DEFAULT_CHANNELS: [usize; 5] = [32, 64, 64, 128, 128];
pub const N_STAGES: usize = 5;
/// Each stage halves both axes, so inputs need at least this many frames.
pub const MIN_FRAMES: usize = 1 << N_STAGES;

pub(crate) fn conv_weight(i: usize) -> String {
    format!("cnn.conv{i}.weight")
}

pub(crate) fn conv_bias(i: usize) -> String {
    format!("cnn.conv{i}.bias")
}

pub(crate) const PROJ_WEIGHT: &str = "cnn.proj.weight";
pub(crate) const PROJ_BIAS: &str = "cnn.proj.bias";

/// Adds freshly initialised CNN parameters to `params`.
pub fn init_cnn(params: &mut ParamSet, channels: &[usize], rng: &mut impl Rng) -> Result<()> {
    ensure!(
        channels.len() == N_STAGES && channels.iter().all(|&c| c > 0),
        Contract,
        "the CNN needs {N_STAGES} positive channel widths, got {channels:?}"
    );
    let mut c_in = 1;
    for (i, &c_out) in channels.iter().enumerate() {
        params.init_uniform(&conv_weight(i), &[c_out, c_in, 3, 3], c_in * 9, c_out * 9, rng);
        params.init_zeros(&conv_bias(i), &[c_out]);
        c_in = c_out;
    }
    params.init_uniform(PROJ_WEIGHT, &[EMBEDDING_DIM, c_in], c_in, EMBEDDING_DIM, rng);
    params.init_zeros(PROJ_BIAS, &[EMBEDDING_DIM]);
    Ok(())
}

/// Reads the channel widths back from parameter shapes, validating the stack.
pub fn cnn_channels<T: Real>(params: &ParamSet<T>) -> Result<Vec<usize>> {
    let mut channels = Vec::with_capacity(N_STAGES);
    let mut c_in = 1;
    for i in 0..N_STAGES {
        let w = params.get(&conv_weight(i))?.shape();
        ensure!(
            w.len() == 4 && w[1] == c_in && w[2] == 3 && w[3] == 3,
            Format,
            "conv{i} weight has shape {w:?}"
        );
        ensure!(
            params.get(&conv_bias(i))?.shape() == [w[0]],
            Format,
            "conv{i} bias does not match its weight"
        );
        channels.push(w[0]);
        c_in = w[0];
    }
    ensure!(
        params.get(PROJ_WEIGHT)?.shape() == [EMBEDDING_DIM, c_in],
        Format,
        "projection must be [{EMBEDDING_DIM}, {c_in}]"
    );
    ensure!(
        params.get(PROJ_BIAS)?.shape() == [EMBEDDING_DIM],
        Format,
        "projection bias must be [{EMBEDDING_DIM}]"
    );
    Ok(channels)
}

/// `[1, 128, F]` log-mel input to the 40-dim pre-normalisation embedding.
///
/// Five stages of conv 3×3 (stride 1, pad 1) → ReLU → maxpool 2×2, a mean
/// over the remaining time-frequency cells, then a linear projection.
pub fn cnn_forward<T: Real>(g: &mut Graph<T>, p: &BoundParams, input: Var) -> Result<Var> {
    let s = g.shape(input);
    ensure!(
        s.len() == 3 && s[0] == 1 && s[1] == N_MELS,
        Dimension,
        "audio input must be [1, {N_MELS}, F], got {s:?}"
    );
    if s[2] < MIN_FRAMES {
        return Err(Error::Dimension(format!(
            "segment has {} frames, the CNN needs at least {MIN_FRAMES}",
            s[2]
        )));
    }
    let mut h = input;
    for i in 0..N_STAGES {
        h = g.conv2d(h, p.var(&conv_weight(i))?, Some(p.var(&conv_bias(i))?), 1, 1)?;
        h = g.relu(h);
        h = g.maxpool2d(h, (2, 2))?;
    }
    let pooled = g.global_avg_pool(h)?;
    g.dense(pooled, p.var(PROJ_WEIGHT)?, Some(p.var(PROJ_BIAS)?))
}

/// Inference-only forward pass of one segment.
pub fn embed_segment(params: &ParamSet, segment: &LogMelSegment) -> Result<AudioEmbedding> {
    let mut g = Graph::<f32>::new();
    let bound = params.bind_frozen(&mut g);
    let x = g.constant(segment.to_tensor());
    let out = cnn_forward(&mut g, &bound, x)?;
    Embedding::new(g.value(out).data().to_vec())
}

/// Spatial size after the five pooling stages, for a `[128, frames]` input.
pub fn pooled_extent(frames: usize) -> (usize, usize) {
    (0..N_STAGES).fold((N_MELS, frames), |(h, w), _| (h / 2, w / 2))
}

pub(crate) fn input_tensor<T: Real>(segment: &LogMelSegment) -> Tensor<T> {
    segment.to_tensor().cast()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_params() -> ParamSet {
        let mut p = ParamSet::new();
        init_cnn(&mut p, &[2, 3, 3, 4, 4], &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        p
    }

    #[test]
    fn shape_walk_through() {
        assert_eq!(pooled_extent(126), (4, 3));
        assert_eq!(pooled_extent(427), (4, 13));
        assert_eq!(pooled_extent(32), (4, 1));
    }

    #[test]
    fn zero_segment_returns_projection_bias() {
        let mut p = small_params();
        let bias: Vec<f32> = (0..EMBEDDING_DIM).map(|i| i as f32 * 0.1 + 0.05).collect();
        *p.get_mut(PROJ_BIAS).unwrap() = Tensor::vector(bias.clone());
        let seg = LogMelSegment::from_values(vec![0.0; N_MELS * 40], 1.0).unwrap();
        let ae = embed_segment(&p, &seg).unwrap();
        assert_eq!(ae.as_slice(), bias.as_slice());
    }

    #[test]
    fn too_short_segment_is_a_dimension_error() {
        let p = small_params();
        let seg = LogMelSegment::from_values(vec![1.0; N_MELS * 31], 1.0).unwrap();
        assert!(matches!(embed_segment(&p, &seg), Err(Error::Dimension(_))));
    }

    #[test]
    fn channel_inference_round_trips() {
        assert_eq!(cnn_channels(&small_params()).unwrap(), vec![2, 3, 3, 4, 4]);
        let mut p = small_params();
        *p.get_mut(PROJ_WEIGHT).unwrap() = Tensor::zeros(&[40, 3]);
        assert!(cnn_channels(&p).is_err());
    }
}
