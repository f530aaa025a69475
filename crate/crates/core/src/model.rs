//! The two-branch forecaster and its ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    spatial_attention, temporal_attention, AttentionWeights, SpatialAttentionParams, TemporalAttentionParams,
};
use crate::error::{Error, Result};
use crate::layers::{backbone_forward, dense, BackboneParams, DenseParams};
use crate::params::{Bindings, Initializer, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

/// Which attention blocks are wired in front of which backbones.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    /// Spatial-attention branch plus temporal-attention branch.
    #[serde(rename = "PSTA_TCN")]
    PstaTcn,
    /// Two plain backbones, no attention.
    #[serde(rename = "P_TCN")]
    PTcn,
    /// Spatial-attention branch plus a plain backbone.
    #[serde(rename = "PSA_TCN")]
    PsaTcn,
    /// Plain backbone plus a temporal-attention branch.
    #[serde(rename = "PTA_TCN")]
    PtaTcn,
    /// A single plain backbone.
    #[serde(rename = "TCN")]
    Tcn,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::PstaTcn,
        Variant::PTcn,
        Variant::PsaTcn,
        Variant::PtaTcn,
        Variant::Tcn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::PstaTcn => "PSTA_TCN",
            Variant::PTcn => "P_TCN",
            Variant::PsaTcn => "PSA_TCN",
            Variant::PtaTcn => "PTA_TCN",
            Variant::Tcn => "TCN",
        }
    }

    fn branches(self) -> &'static [BranchKind] {
        use BranchKind::*;
        match self {
            Variant::PstaTcn => &[Spatial, Temporal],
            Variant::PTcn => &[PlainSpatialSide, PlainTemporalSide],
            Variant::PsaTcn => &[Spatial, PlainTemporalSide],
            Variant::PtaTcn => &[PlainSpatialSide, Temporal],
            Variant::Tcn => &[Single],
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == norm)
            .ok_or_else(|| Error::config("variant", format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BranchKind {
    Spatial,
    Temporal,
    PlainSpatialSide,
    PlainTemporalSide,
    Single,
}

impl BranchKind {
    fn prefix(self) -> &'static str {
        match self {
            BranchKind::Spatial | BranchKind::PlainSpatialSide => "spatial",
            BranchKind::Temporal | BranchKind::PlainTemporalSide => "temporal",
            BranchKind::Single => "tcn",
        }
    }
}

/// Architecture and initialization settings.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub variant: Variant,
    /// Exogenous series; the window carries `n_exog + 1` rows.
    pub n_exog: usize,
    /// Window size `T`.
    pub window: usize,
    /// Prediction steps `tau`.
    pub horizon: usize,
    pub kernel_size: usize,
    pub levels: usize,
    pub hidden: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for ModelSpec {
    /// Kernel 7, 8 levels, 12 hidden channels, window 32, seed 1111.
    fn default() -> Self {
        ModelSpec {
            variant: Variant::PstaTcn,
            n_exog: 25,
            window: 32,
            horizon: 1,
            kernel_size: 7,
            levels: 8,
            hidden: 12,
            dropout: 0.0,
            seed: 1111,
        }
    }
}

impl ModelSpec {
    pub fn channels(&self) -> usize {
        self.n_exog + 1
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_exog", self.n_exog),
            ("window", self.window),
            ("horizon", self.horizon),
            ("kernel_size", self.kernel_size),
            ("levels", self.levels),
            ("hidden", self.hidden),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if self.levels > 30 {
            return Err(Error::config(
                "levels",
                format!("{} levels overflow the dilation", self.levels),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout", format!("{} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
enum BranchAttention {
    None,
    Spatial(SpatialAttentionParams),
    Temporal(TemporalAttentionParams),
}

#[derive(Clone, Debug)]
struct Branch {
    attention: BranchAttention,
    backbone: BackboneParams,
    head: DenseParams,
}

/// Output of a batched forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    /// `[horizon, batch]`
    pub prediction: NodeId,
    pub alpha: Option<NodeId>,
    pub beta: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct ForecastModel<S> {
    spec: ModelSpec,
    branches: Vec<Branch>,
    params: ParamStore<S>,
}

impl<S: Scalar> ForecastModel<S> {
    /// Wires the variant and draws every initial value from `spec.seed`.
    pub fn build(spec: ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Initializer::new(spec.seed);
        let c = spec.channels();
        let branches = spec
            .variant
            .branches()
            .iter()
            .map(|&kind| {
                let prefix = kind.prefix();
                let attention = match kind {
                    BranchKind::Spatial => BranchAttention::Spatial(SpatialAttentionParams::init(
                        &mut params,
                        &mut init,
                        &format!("{prefix}.attention"),
                        c,
                    )?),
                    BranchKind::Temporal => BranchAttention::Temporal(TemporalAttentionParams::init(
                        &mut params,
                        &mut init,
                        &format!("{prefix}.attention"),
                        spec.window,
                    )?),
                    _ => BranchAttention::None,
                };
                let backbone = BackboneParams::init(
                    &mut params,
                    &mut init,
                    &format!("{prefix}.backbone"),
                    c,
                    spec.hidden,
                    spec.kernel_size,
                    spec.levels,
                    spec.dropout,
                )?;
                let head = DenseParams::init(
                    &mut params,
                    &mut init,
                    &format!("{prefix}.head"),
                    spec.hidden,
                    spec.horizon,
                )?;
                Ok(Branch {
                    attention,
                    backbone,
                    head,
                })
            })
            .collect::<Result<_>>()?;
        Ok(ForecastModel { spec, branches, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &ParamStore<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<S> {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.numel()
    }

    pub fn branch_count(&self) -> usize {
        self.branches.len()
    }

    /// Number of scalars belonging to attention blocks.
    pub fn attention_parameter_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.contains(".attention."))
            .map(|p| p.data.len())
            .sum()
    }

    /// Batched forward over `input: [channels, window, batch]`, returning
    /// `[horizon, batch]`. Each branch reads its backbone's features at the
    /// last step and maps them through its dense head; branch outputs are
    /// summed.
    pub fn forward_graph(&self, g: &mut Graph<S>, bind: &Bindings, input: NodeId) -> Result<ForwardOutput> {
        let shape = g.shape(input);
        let (c, t) = (self.spec.channels(), self.spec.window);
        if shape.len() != 3 || shape[0] != c || shape[1] != t {
            return Err(Error::shape(
                "forward",
                shape,
                &[c, t, shape.get(2).copied().unwrap_or(1)],
            ));
        }
        let mut out = ForwardOutput {
            prediction: input,
            alpha: None,
            beta: None,
        };
        let mut total: Option<NodeId> = None;
        for branch in &self.branches {
            let x = match &branch.attention {
                BranchAttention::None => input,
                BranchAttention::Spatial(p) => {
                    let a = spatial_attention(g, bind, input, p)?;
                    out.alpha = Some(a.weights);
                    a.weighted
                }
                BranchAttention::Temporal(p) => {
                    let a = temporal_attention(g, bind, input, p)?;
                    out.beta = Some(a.weights);
                    a.weighted
                }
            };
            let features = backbone_forward(g, bind, x, &branch.backbone)?;
            let last = g.select(features, 1, t - 1)?;
            let y = dense(g, bind, last, &branch.head)?;
            total = Some(match total {
                Some(acc) => g.add(acc, y)?,
                None => y,
            });
        }
        out.prediction = total.expect("every variant has a branch");
        Ok(out)
    }

    /// Packs windows (each `[channels x window]` row-major) into a
    /// `[channels, window, batch]` constant.
    pub fn pack_batch(&self, g: &mut Graph<S>, windows: &[&[f64]]) -> Result<NodeId> {
        let per = self.spec.channels() * self.spec.window;
        let batch = windows.len();
        if batch == 0 {
            return Err(Error::Usage("empty batch".into()));
        }
        let mut data = vec![S::zero(); per * batch];
        for (b, w) in windows.iter().enumerate() {
            if w.len() != per {
                return Err(Error::shape(
                    "window",
                    &[w.len()],
                    &[self.spec.channels(), self.spec.window],
                ));
            }
            for (idx, &v) in w.iter().enumerate() {
                data[idx * batch + b] = S::of(v);
            }
        }
        g.constant(&[self.spec.channels(), self.spec.window, batch], data)
    }

    /// Forecast for one window. With `training` dropout is sampled from a
    /// generator seeded by `ModelSpec::seed`.
    pub fn forward(&self, window: &[f64], training: bool) -> Result<Vec<f64>> {
        let mut g = if training {
            Graph::training(self.spec.seed)
        } else {
            Graph::new()
        };
        let bind = self.params.bind(&mut g, false)?;
        let x = self.pack_batch(&mut g, &[window])?;
        let out = self.forward_graph(&mut g, &bind, x)?;
        Ok(g.value(out.prediction).iter().map(|v| v.as_f64()).collect())
    }

    /// All `horizon` steps from one pass (direct, not recursive).
    pub fn predict_multi(&self, window: &[f64]) -> Result<Vec<f64>> {
        self.forward(window, false)
    }

    /// Inference over many windows, `chunk` windows per graph.
    pub fn predict_batch(&self, windows: &[&[f64]], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let h = self.spec.horizon;
        let mut preds = Vec::with_capacity(windows.len());
        for part in windows.chunks(chunk.max(1)) {
            let mut g = Graph::new();
            let bind = self.params.bind(&mut g, false)?;
            let x = self.pack_batch(&mut g, part)?;
            let out = self.forward_graph(&mut g, &bind, x)?;
            let v = g.value(out.prediction);
            let batch = part.len();
            for b in 0..batch {
                preds.push((0..h).map(|s| v[s * batch + b].as_f64()).collect());
            }
        }
        Ok(preds)
    }

    /// Spatial and temporal weights the model assigns to one window.
    pub fn attention_weights(&self, window: &[f64]) -> Result<AttentionWeights> {
        let mut g = Graph::new();
        let bind = self.params.bind(&mut g, false)?;
        let x = self.pack_batch(&mut g, &[window])?;
        let out = self.forward_graph(&mut g, &bind, x)?;
        let grab = |id: Option<NodeId>| id.map(|id| g.value(id).iter().map(|v| v.as_f64()).collect());
        Ok(AttentionWeights {
            alpha: grab(out.alpha),
            beta: grab(out.beta),
        })
    }
}
