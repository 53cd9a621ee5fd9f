use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAX_PERIOD: f64 = 10_000.0;

fn fill(k: usize, out: &mut [f64]) {
    let half = out.len() / 2;
    for i in 0..half {
        let freq = MAX_PERIOD.powf(-(i as f64) / half as f64);
        let arg = k as f64 * freq;
        out[2 * i] = arg.sin();
        out[2 * i + 1] = arg.cos();
    }
}

/// Sinusoidal embedding of a diffusion step: interleaved `(sin, cos)` pairs
/// at geometrically spaced frequencies from 1 down to `1/10000`. Shape `[1, dim]`.
pub fn timestep_embed(k: usize, dim: usize) -> Result<Tensor> {
    timestep_embed_batch(&[k], dim)
}

/// One embedding row per entry of `ks`.
pub fn timestep_embed_batch(ks: &[usize], dim: usize) -> Result<Tensor> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "timestep embedding dim must be even and positive, got {}",
            dim
        )));
    }
    let mut data = vec![0.0; ks.len() * dim];
    for (row, &k) in data.chunks_mut(dim).zip(ks) {
        fill(k, row);
    }
    Tensor::matrix(ks.len(), dim, data)
}
