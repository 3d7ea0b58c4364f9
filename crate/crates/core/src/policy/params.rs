use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture sizes chosen by the user. Vocabulary and drug counts come
/// from the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub token_dim: usize,
    pub text_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    /// Longest completion, also the scale of the position feature.
    pub max_tokens: usize,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            token_dim: 8,
            text_dim: 24,
            proj_dim: 8,
            hidden: 48,
            max_tokens: 81,
        }
    }
}

/// Every size the parameter tensors depend on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyDims {
    pub n_drugs: usize,
    pub n_symbols: usize,
    pub name_len: usize,
    pub feature_dim: usize,
    pub token_dim: usize,
    pub text_dim: usize,
    pub collab_dim: usize,
    pub proj_dim: usize,
    pub hidden: usize,
    pub max_tokens: usize,
}

/// Offsets of the context feature blocks inside the trunk input.
#[derive(Debug, Clone, Copy)]
pub(crate) struct InputLayout {
    pub features: usize,
    pub history: usize,
    pub has_history: usize,
    pub instruction: usize,
    pub pooled: usize,
    pub set_size: usize,
    pub slot: usize,
    pub token_mean: usize,
    pub position: usize,
    pub len: usize,
}

pub(crate) const N_INSTRUCTIONS: usize = 3;

impl PolicyDims {
    pub fn vocab_size(&self) -> usize {
        self.n_symbols + 2
    }

    /// Width of a fused drug embedding: text part plus projected collaborative part.
    pub fn fused_dim(&self) -> usize {
        self.text_dim + self.proj_dim
    }

    pub(crate) fn layout(&self) -> InputLayout {
        let f = self.feature_dim;
        let features = 0;
        let history = features + f;
        let has_history = history + f;
        let instruction = has_history + 1;
        let pooled = instruction + N_INSTRUCTIONS;
        let set_size = pooled + self.fused_dim();
        let slot = set_size + 1;
        let token_mean = slot + self.name_len + 1;
        let position = token_mean + self.token_dim;
        let len = position + 1;
        InputLayout {
            features,
            history,
            has_history,
            instruction,
            pooled,
            set_size,
            slot,
            token_mean,
            position,
            len,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layout().len
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            ("n_drugs", self.n_drugs),
            ("n_symbols", self.n_symbols),
            ("name_len", self.name_len),
            ("token_dim", self.token_dim),
            ("text_dim", self.text_dim),
            ("collab_dim", self.collab_dim),
            ("proj_dim", self.proj_dim),
            ("hidden", self.hidden),
            ("max_tokens", self.max_tokens),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Config(format!(
                    "policy dimension {name} must be positive"
                )));
            }
        }
        Ok(())
    }
}

/// Which role a tensor serves, used for initialization and freezing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    /// Trunk and embeddings shared by the classifier and the list editor.
    Shared,
    /// Collaborative projection; trainable only during supervised fine-tuning.
    Projection,
    /// Never updated.
    Frozen,
    ClassifierOnly,
    ListOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }

    fn scaled_normal<R: Rng>(shape: &[usize], scale: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        Self {
            shape: shape.to_vec(),
            data,
        }
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        let w = self.shape[1];
        &self.data[r * w..(r + 1) * w]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        let w = self.shape[1];
        &mut self.data[r * w..(r + 1) * w]
    }
}

macro_rules! policy_tensors {
    ($($field:ident: $role:ident),* $(,)?) => {
        /// All parameters of the token policy, the per-drug classifier head and
        /// the embedding fusion.
        ///
        /// Matrices are row-major `[out, in]`.
        #[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
        pub struct PolicyParams {
            pub dims: PolicyDims,
            $(pub $field: Tensor,)*
        }

        impl PolicyParams {
            pub const TENSOR_NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn tensors(&self) -> Vec<(&'static str, TensorRole, &Tensor)> {
                vec![$((stringify!($field), TensorRole::$role, &self.$field)),*]
            }

            pub fn tensors_mut(&mut self) -> Vec<(&'static str, TensorRole, &mut Tensor)> {
                vec![$((stringify!($field), TensorRole::$role, &mut self.$field)),*]
            }
        }
    };
}

policy_tensors! {
    tok_emb: Shared,
    text_emb: Shared,
    collab: Frozen,
    proj_w: Projection,
    proj_b: Projection,
    w1: Shared,
    b1: Shared,
    wd: Shared,
    bd: Shared,
    cls_bias: ClassifierOnly,
    wo: ListOnly,
    bo: ListOnly,
    offname: ListOnly,
    inst_scale: ListOnly,
    inst_inset: ListOnly,
    inst_ddi: ListOnly,
}

impl PolicyParams {
    /// All-zero parameters with the given collaborative table.
    pub fn zeros(dims: PolicyDims, collab: Tensor) -> Result<Self> {
        dims.validate()?;
        if collab.shape != [dims.n_drugs, dims.collab_dim] {
            return Err(Error::Config(format!(
                "collaborative table has shape {:?}, expected [{}, {}]",
                collab.shape, dims.n_drugs, dims.collab_dim
            )));
        }
        let v = dims.vocab_size();
        let k = dims.fused_dim();
        let h = dims.hidden;
        let x = dims.input_dim();
        Ok(Self {
            dims,
            tok_emb: Tensor::zeros(&[v, dims.token_dim]),
            text_emb: Tensor::zeros(&[dims.n_drugs, dims.text_dim]),
            collab,
            proj_w: Tensor::zeros(&[dims.proj_dim, dims.collab_dim]),
            proj_b: Tensor::zeros(&[dims.proj_dim]),
            w1: Tensor::zeros(&[h, x]),
            b1: Tensor::zeros(&[h]),
            wd: Tensor::zeros(&[k, h]),
            bd: Tensor::zeros(&[k]),
            cls_bias: Tensor::zeros(&[1]),
            wo: Tensor::zeros(&[v, h]),
            bo: Tensor::zeros(&[v]),
            offname: Tensor::zeros(&[1]),
            inst_scale: Tensor::zeros(&[2]),
            inst_inset: Tensor::zeros(&[2]),
            inst_ddi: Tensor::zeros(&[2]),
        })
    }

    /// A gradient accumulator shaped like `self` (the frozen table is zero).
    pub fn zeros_like(&self) -> Self {
        let mut out = self.clone();
        for (_, _, t) in out.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x = 0.0);
        }
        out
    }

    /// Fresh parameters: weights and embeddings are zero-mean normal with
    /// scale `1/sqrt(fan_in)`, biases zero.
    pub fn init<R: Rng>(dims: PolicyDims, collab: Tensor, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(dims, collab)?;
        p.reinit(rng, |_| true);
        Ok(p)
    }

    /// List-editor parameters seeded from a trained classifier: shared
    /// tensors are copied, list-only heads are drawn fresh.
    pub fn list_from_classifier<R: Rng>(cls: &PolicyParams, rng: &mut R) -> Self {
        let mut p = cls.clone();
        p.reinit(rng, |role| role == TensorRole::ListOnly);
        p
    }

    fn reinit<R: Rng>(&mut self, rng: &mut R, select: impl Fn(TensorRole) -> bool) {
        let d = self.dims;
        for (name, role, t) in self.tensors_mut() {
            if role == TensorRole::Frozen || !select(role) {
                continue;
            }
            let scale = match name {
                "tok_emb" => 1.0 / (d.token_dim as f64).sqrt(),
                "text_emb" => 1.0 / (d.text_dim as f64).sqrt(),
                "proj_w" => 1.0 / (d.collab_dim as f64).sqrt(),
                "w1" => 1.0 / (d.input_dim() as f64).sqrt(),
                "wd" | "wo" => 1.0 / (d.hidden as f64).sqrt(),
                "inst_scale" => 1.0,
                _ => 0.0,
            };
            *t = if scale == 0.0 {
                Tensor::zeros(&t.shape)
            } else {
                Tensor::scaled_normal(&t.shape, scale, rng)
            };
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, _, t)| t.data.iter().all(|x| x.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn axpy(&mut self, alpha: f64, other: &PolicyParams) {
        for ((_, _, a), (_, _, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += alpha * y;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for (_, _, t) in self.tensors_mut() {
            t.data.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    /// Concatenation of every tensor except the frozen table.
    pub fn learnable_flat(&self) -> Vec<f64> {
        self.tensors()
            .into_iter()
            .filter(|(_, role, _)| *role != TensorRole::Frozen)
            .flat_map(|(_, _, t)| t.data.iter().copied())
            .collect()
    }

    pub fn set_learnable_flat(&mut self, flat: &[f64]) {
        let mut off = 0;
        for (_, role, t) in self.tensors_mut() {
            if role == TensorRole::Frozen {
                continue;
            }
            let n = t.data.len();
            t.data.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        assert_eq!(
            off,
            flat.len(),
            "flat parameter vector has the wrong length"
        );
    }

    pub fn max_abs(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, t)| t.data.iter())
            .fold(0.0f64, |m, x| m.max(x.abs()))
    }
}
