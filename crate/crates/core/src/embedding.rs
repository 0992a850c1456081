use crate::error::{ensure, Error, Result};

/// Width of both user and audio embeddings.
pub const EMBEDDING_DIM: usize = 40;

/// A finite, non-zero 40-dimensional vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Embedding(Vec<f32>);

/// Output of the user branch.
pub type UserEmbedding = Embedding;
/// Output of the audio branch.
pub type AudioEmbedding = Embedding;

impl Embedding {
    pub fn new(values: Vec<f32>) -> Result<Self> {
        ensure!(
            values.len() == EMBEDDING_DIM,
            Dimension,
            "embedding must have {EMBEDDING_DIM} values, got {}",
            values.len()
        );
        ensure!(
            values.iter().all(|v| v.is_finite()),
            Contract,
            "embedding contains non-finite values"
        );
        if values.iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate("embedding has zero norm".into()));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn cosine(&self, other: &Embedding) -> f32 {
        cosine(&self.0, &other.0).expect("embeddings are non-zero and equal length")
    }
}

pub(crate) fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// `uᵀr / (|u|·|r|)`, accumulated in `f64`.
pub fn cosine(u: &[f32], r: &[f32]) -> Result<f32> {
    ensure!(
        u.len() == r.len(),
        Dimension,
        "cosine of vectors with {} and {} entries",
        u.len(),
        r.len()
    );
    let (nu, nr) = (norm(u), norm(r));
    if nu == 0.0 || nr == 0.0 {
        return Err(Error::Degenerate("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = u.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum();
    Ok((dot / (nu * nr)).clamp(-1.0, 1.0) as f32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_vectors() {
        assert!(matches!(Embedding::new(vec![0.0; 40]), Err(Error::Degenerate(_))));
        assert!(matches!(Embedding::new(vec![1.0; 39]), Err(Error::Dimension(_))));
        let mut v = vec![1.0; 40];
        v[3] = f32::NAN;
        assert!(Embedding::new(v).is_err());
    }

    #[test]
    fn cosine_is_symmetric_and_scale_free() {
        let a: Vec<f32> = (0..40).map(|i| (i as f32 * 0.3).sin()).collect();
        let b: Vec<f32> = (0..40).map(|i| (i as f32 * 0.7).cos()).collect();
        let scaled: Vec<f32> = a.iter().map(|v| v * 4.0).collect();
        assert_eq!(cosine(&a, &b).unwrap(), cosine(&b, &a).unwrap());
        assert!((cosine(&a, &b).unwrap() - cosine(&scaled, &b).unwrap()).abs() < 1e-6);
    }
}
