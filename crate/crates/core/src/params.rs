//! Uniform access to trainable tensors, so the optimizer, the gradient
//! checker and checkpointing can walk any parameter set in a fixed order.

/// A named view of one parameter tensor.
#[derive(Debug, Clone)]
pub struct TensorRef<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: &'a [f64],
}

pub trait Parameters {
    /// Every tensor, in canonical order, with names rooted at `prefix`.
    fn tensors(&self, prefix: &str) -> Vec<TensorRef<'_>>;

    /// The same tensors as [`Parameters::tensors`], in the same order.
    fn tensors_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.tensors("").iter().map(|t| t.data.len()).sum()
    }

    fn zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    /// `self += alpha * other`; both sides must have identical layout.
    fn axpy_from(&mut self, alpha: f64, other: &Self)
    where
        Self: Sized,
    {
        let src = other.tensors("");
        let dst = self.tensors_mut();
        assert_eq!(src.len(), dst.len(), "parameter layout mismatch");
        for (d, s) in dst.into_iter().zip(src) {
            assert_eq!(d.len(), s.data.len(), "tensor `{}` size mismatch", s.name);
            for (a, b) in d.iter_mut().zip(s.data) {
                *a += alpha * b;
            }
        }
    }

    /// All values flattened in canonical order.
    fn flatten(&self) -> Vec<f64> {
        self.tensors("")
            .into_iter()
            .flat_map(|t| t.data.iter().copied())
            .collect()
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}
