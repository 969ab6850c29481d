//! Shuffled parameter sharing.
//!
//! A student stack is described by a [`SharingPlan`]: an ordered list of
//! physical layers, each pointing at one stored parameter set. Sharing step 1
//! doubles the stack by aliasing layer `n+i` onto set `i`; step 2 additionally
//! swaps the query/key roles in the aliased copies. Aliasing is resolved by
//! indirection at forward time — weights are never copied, so parameter
//! counts and gradient accumulation fall out of the storage layout itself.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderConfig, LayerParams, ModelParams};
use crate::error::{KdError, Result};
use crate::numkit::{Tensor, TensorStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SpsMode {
    Plain,
    Sps1,
    Sps2,
}

impl std::fmt::Display for SpsMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            SpsMode::Plain => write!(f, "plain"),
            SpsMode::Sps1 => write!(f, "sps1"),
            SpsMode::Sps2 => write!(f, "sps2"),
        }
    }
}

impl std::str::FromStr for SpsMode {
    type Err = KdError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(SpsMode::Plain),
            "sps1" => Ok(SpsMode::Sps1),
            "sps2" => Ok(SpsMode::Sps2),
            other => Err(KdError::Config(format!("unknown sps mode {other:?}"))),
        }
    }
}

/// How a physical layer reads its parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoleMap {
    Identity,
    /// Effective W_Q is the stored W_K and vice versa (biases too). All
    /// other tensors resolve unchanged.
    SwapQK,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlanEntry {
    pub param_set_id: usize,
    pub role: RoleMap,
}

/// One entry per physical layer, in execution order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SharingPlan {
    pub entries: Vec<PlanEntry>,
    pub num_param_sets: usize,
}

impl SharingPlan {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Structural sanity: all set ids in range and used at least once, and
    /// swapped entries only reference sets already introduced unswapped.
    pub fn validate(&self) -> Result<()> {
        let mut seen_identity = vec![false; self.num_param_sets];
        let mut used = vec![false; self.num_param_sets];
        for (layer, e) in self.entries.iter().enumerate() {
            if e.param_set_id >= self.num_param_sets {
                return Err(KdError::invalid(
                    "sharing_plan",
                    format!(
                        "layer {layer} references set {} of {}",
                        e.param_set_id, self.num_param_sets
                    ),
                ));
            }
            used[e.param_set_id] = true;
            match e.role {
                RoleMap::Identity => seen_identity[e.param_set_id] = true,
                RoleMap::SwapQK => {
                    if !seen_identity[e.param_set_id] {
                        return Err(KdError::invalid(
                            "sharing_plan",
                            format!(
                                "layer {layer} swaps set {} before any identity use",
                                e.param_set_id
                            ),
                        ));
                    }
                }
            }
        }
        if let Some(never) = used.iter().position(|u| !u) {
            return Err(KdError::invalid(
                "sharing_plan",
                format!("param set {never} is never referenced"),
            ));
        }
        Ok(())
    }
}

/// Build the layer stack for a student with `n_independent` parameter sets.
///
/// - `Plain`: n physical layers, one set each.
/// - `Sps1`: 2n physical layers; layer n+i re-reads set i unchanged.
/// - `Sps2`: like `Sps1` but the upper copies swap query/key roles.
/// - Exception: `n_independent == 6` applies sharing to the top three sets
///   only — 9 physical layers, with layers 6..8 re-reading sets 3..5.
pub fn build_sharing_plan(n_independent: usize, mode: SpsMode) -> SharingPlan {
    assert!(n_independent >= 1, "need at least one parameter set");
    let shared_role = match mode {
        SpsMode::Sps1 => RoleMap::Identity,
        SpsMode::Sps2 => RoleMap::SwapQK,
        SpsMode::Plain => RoleMap::Identity,
    };
    let mut entries: Vec<PlanEntry> = (0..n_independent)
        .map(|i| PlanEntry { param_set_id: i, role: RoleMap::Identity })
        .collect();
    match mode {
        SpsMode::Plain => {}
        SpsMode::Sps1 | SpsMode::Sps2 => {
            let shared: Vec<usize> = if n_independent == 6 {
                vec![3, 4, 5]
            } else {
                (0..n_independent).collect()
            };
            entries.extend(
                shared
                    .into_iter()
                    .map(|set| PlanEntry { param_set_id: set, role: shared_role }),
            );
        }
    }
    SharingPlan { entries, num_param_sets: n_independent }
}

/// Parameter storage for one model: embeddings, `num_param_sets` encoder
/// layer records, and the classification head, all living in a single
/// [`TensorStore`]. Layer records exist exactly once no matter how many
/// physical layers reference them.
#[derive(Debug, Clone)]
pub struct ParamStore {
    pub config: EncoderConfig,
    pub tensors: TensorStore,
    pub model: ModelParams,
}

fn insert_param(
    tensors: &mut TensorStore,
    name: String,
    shape: Vec<usize>,
    mut fill: impl FnMut(usize) -> f64,
) -> crate::numkit::ParamId {
    let numel = shape.iter().product();
    let data: Vec<f64> = (0..numel).map(&mut fill).collect();
    tensors.insert(name, Tensor::new(shape, data).expect("consistent shape").with_grad(true))
}

fn build_layer_set(tensors: &mut TensorStore, set: usize, d: usize, ff: usize) -> LayerParams {
    let matrix = |tensors: &mut TensorStore, name: &str, rows: usize, cols: usize| {
        insert_param(tensors, format!("set{set}.{name}"), vec![rows, cols], |_| 0.0)
    };
    let w_q = matrix(tensors, "w_q", d, d);
    let w_k = matrix(tensors, "w_k", d, d);
    let w_v = matrix(tensors, "w_v", d, d);
    let w_o = matrix(tensors, "w_o", d, d);
    let w_ff1 = matrix(tensors, "w_ff1", d, ff);
    let w_ff2 = matrix(tensors, "w_ff2", ff, d);
    let zeros = |tensors: &mut TensorStore, name: &str, n: usize| {
        insert_param(tensors, format!("set{set}.{name}"), vec![n], |_| 0.0)
    };
    let b_q = zeros(tensors, "b_q", d);
    let b_k = zeros(tensors, "b_k", d);
    let b_v = zeros(tensors, "b_v", d);
    let b_o = zeros(tensors, "b_o", d);
    let b_ff1 = zeros(tensors, "b_ff1", ff);
    let b_ff2 = zeros(tensors, "b_ff2", d);
    let ln1_scale = insert_param(tensors, format!("set{set}.ln1_scale"), vec![d], |_| 1.0);
    let ln1_shift = zeros(tensors, "ln1_shift", d);
    let ln2_scale = insert_param(tensors, format!("set{set}.ln2_scale"), vec![d], |_| 1.0);
    let ln2_shift = zeros(tensors, "ln2_shift", d);
    LayerParams {
        w_q,
        b_q,
        w_k,
        b_k,
        w_v,
        b_v,
        w_o,
        b_o,
        w_ff1,
        b_ff1,
        w_ff2,
        b_ff2,
        ln1_scale,
        ln1_shift,
        ln2_scale,
        ln2_shift,
    }
}

impl ParamStore {
    /// Xavier-uniform weight matrices, uniform small embeddings, zero
    /// biases, unit layer-norm scales. Sampling order is the store's
    /// insertion order, so a seeded generator gives reproducible models.
    pub fn random_init(
        config: EncoderConfig,
        num_param_sets: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut s = Self::zeros_init(config, num_param_sets)?;
        for id in s.tensors.ids().collect::<Vec<_>>() {
            let name = s.tensors.name(id).to_string();
            let t = s.tensors.get_mut(id);
            let shape = t.shape().to_vec();
            if name == "tok_emb" || name == "pos_emb" {
                for v in t.data_mut() {
                    *v = rng.gen_range(-0.04..0.04);
                }
            } else if shape.len() == 2 {
                let bound = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                for v in t.data_mut() {
                    *v = rng.gen_range(-bound..bound);
                }
            }
            // biases stay zero, layer-norm scales stay one
        }
        Ok(s)
    }

    /// All-zero weights with unit layer-norm scales; useful for shape and
    /// degenerate-forward tests.
    pub fn zeros_init(config: EncoderConfig, num_param_sets: usize) -> Result<Self> {
        config.validate()?;
        if num_param_sets == 0 {
            return Err(KdError::invalid("param_store", "need at least one parameter set"));
        }
        let d = config.hidden_dim;
        let ff = config.ff_dim;
        let mut tensors = TensorStore::new();
        let tok_emb = insert_param(
            &mut tensors,
            "tok_emb".into(),
            vec![config.vocab_size, d],
            |_| 0.0,
        );
        let pos_emb = insert_param(
            &mut tensors,
            "pos_emb".into(),
            vec![config.max_seq_len, d],
            |_| 0.0,
        );
        let layer_sets: Vec<LayerParams> = (0..num_param_sets)
            .map(|set| build_layer_set(&mut tensors, set, d, ff))
            .collect();
        let head_w =
            insert_param(&mut tensors, "head.w".into(), vec![d, config.num_classes], |_| 0.0);
        let head_b = insert_param(&mut tensors, "head.b".into(), vec![config.num_classes], |_| 0.0);
        Ok(ParamStore {
            config,
            tensors,
            model: ModelParams { tok_emb, pos_emb, layer_sets, head_w, head_b },
        })
    }

    pub fn num_param_sets(&self) -> usize {
        self.model.layer_sets.len()
    }

    /// Same config and handle layout over a different tensor arena — used
    /// by gradient checking, which perturbs a standalone `TensorStore`.
    pub fn with_tensors(&self, tensors: TensorStore) -> ParamStore {
        ParamStore { config: self.config, tensors, model: self.model.clone() }
    }
}

/// Effective parameters of one physical layer: the referenced set's handles,
/// with query/key swapped when the plan says so. The returned record holds
/// ids into the same storage — mutate the store and every referencing layer
/// sees the change.
pub fn resolve_layer_params(store: &ParamStore, plan: &SharingPlan, layer: usize) -> LayerParams {
    let entry = plan.entries[layer];
    let set = store.model.layer_sets[entry.param_set_id];
    match entry.role {
        RoleMap::Identity => set,
        RoleMap::SwapQK => set.swap_qk(),
    }
}

/// Element count over distinct stored tensors. Aliased layer references add
/// nothing — there is only one record per set to count. With
/// `include_embeddings` false, only encoder-layer parameters are counted
/// (embeddings and classification head excluded).
pub fn count_parameters(store: &ParamStore, include_embeddings: bool) -> usize {
    store
        .tensors
        .count_elems(|name| include_embeddings || name.starts_with("set"))
}
