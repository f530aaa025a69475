//! Temporal convolution building blocks.
//!
//! Sequence tensors are `[channels, steps, batch]`. Whether dropout is live
//! follows the graph: a [`Graph::training`] graph samples masks, an
//! inference graph skips them.

use crate::error::{Error, Result};
use crate::params::{Bindings, Initializer, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{Graph, NodeId};

/// One causal dilated convolution: kernel `[c_out, c_in, kernel_size]`,
/// bias `[c_out]`.
#[derive(Clone, Debug)]
pub struct ConvLayerParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel_size: usize,
    pub dilation: usize,
}

impl ConvLayerParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel_size == 0 {
            return Err(Error::config("kernel_size", "must be at least 1"));
        }
        if dilation == 0 {
            return Err(Error::config("dilation", "must be at least 1"));
        }
        let weight = init.weight(
            store,
            &format!("{name}.weight"),
            &[c_out, c_in, kernel_size],
            c_in * kernel_size,
        )?;
        let bias = init.bias(store, &format!("{name}.bias"), c_out)?;
        Ok(ConvLayerParams {
            weight,
            bias,
            c_in,
            c_out,
            kernel_size,
            dilation,
        })
    }

    /// Steps of history one output position sees, itself included.
    pub fn receptive_field(&self) -> usize {
        (self.kernel_size - 1) * self.dilation + 1
    }
}

pub fn causal_dilated_conv<S: Scalar>(
    g: &mut Graph<S>,
    bind: &Bindings,
    x: NodeId,
    p: &ConvLayerParams,
) -> Result<NodeId> {
    let shape = g.shape(x);
    if shape.len() != 3 || shape[0] != p.c_in {
        return Err(Error::shape("causal_dilated_conv", shape, &[p.c_in, 0, 0]));
    }
    g.causal_conv(x, bind[p.weight], bind[p.bias], p.dilation)
}

/// Two same-dilation convolutions plus the residual path:
/// `relu(residual(x) + F(x))`, where `F` is conv, relu, dropout, conv,
/// relu, dropout and `residual` is a 1x1 convolution exactly when the
/// channel counts differ.
#[derive(Clone, Debug)]
pub struct ResidualBlockParams {
    pub conv1: ConvLayerParams,
    pub conv2: ConvLayerParams,
    pub downsample: Option<ConvLayerParams>,
    pub dropout_rate: f64,
}

impl ResidualBlockParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        c_out: usize,
        kernel_size: usize,
        dilation: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::config("dropout", format!("{dropout_rate} outside [0, 1)")));
        }
        let conv1 = ConvLayerParams::init(
            store,
            init,
            &format!("{name}.conv1"),
            c_in,
            c_out,
            kernel_size,
            dilation,
        )?;
        let conv2 = ConvLayerParams::init(
            store,
            init,
            &format!("{name}.conv2"),
            c_out,
            c_out,
            kernel_size,
            dilation,
        )?;
        let downsample = if c_in != c_out {
            Some(ConvLayerParams::init(
                store,
                init,
                &format!("{name}.downsample"),
                c_in,
                c_out,
                1,
                1,
            )?)
        } else {
            None
        };
        Ok(ResidualBlockParams {
            conv1,
            conv2,
            downsample,
            dropout_rate,
        })
    }
}

pub fn residual_block<S: Scalar>(
    g: &mut Graph<S>,
    bind: &Bindings,
    x: NodeId,
    p: &ResidualBlockParams,
) -> Result<NodeId> {
    let h = causal_dilated_conv(g, bind, x, &p.conv1)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, p.dropout_rate)?;
    let h = causal_dilated_conv(g, bind, h, &p.conv2)?;
    let h = g.relu(h)?;
    let h = g.dropout(h, p.dropout_rate)?;
    let skip = match &p.downsample {
        Some(ds) => causal_dilated_conv(g, bind, x, ds)?,
        None => x,
    };
    let sum = g.add(skip, h)?;
    g.relu(sum)
}

/// `levels` residual blocks with dilation `2^i` at level `i`.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub blocks: Vec<ResidualBlockParams>,
    pub hidden: usize,
}

impl BackboneParams {
    #[allow(clippy::too_many_arguments)]
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        c_in: usize,
        hidden: usize,
        kernel_size: usize,
        levels: usize,
        dropout_rate: f64,
    ) -> Result<Self> {
        if levels == 0 {
            return Err(Error::config("levels", "must be at least 1"));
        }
        if levels >= usize::BITS as usize {
            return Err(Error::config("levels", format!("{levels} overflows the dilation")));
        }
        let blocks = (0..levels)
            .map(|i| {
                let c = if i == 0 { c_in } else { hidden };
                ResidualBlockParams::init(
                    store,
                    init,
                    &format!("{name}.{i}"),
                    c,
                    hidden,
                    kernel_size,
                    1 << i,
                    dropout_rate,
                )
            })
            .collect::<Result<_>>()?;
        Ok(BackboneParams { blocks, hidden })
    }

    pub fn receptive_field(&self) -> usize {
        let k = self.blocks[0].conv1.kernel_size;
        receptive_field(k, self.blocks.len())
    }
}

/// Input steps that can reach one output position of a backbone with two
/// convolutions per block: `1 + 2 (k - 1) (2^levels - 1)`.
pub fn receptive_field(kernel_size: usize, levels: usize) -> usize {
    1 + 2 * (kernel_size - 1) * ((1usize << levels) - 1)
}

pub fn backbone_forward<S: Scalar>(g: &mut Graph<S>, bind: &Bindings, x: NodeId, p: &BackboneParams) -> Result<NodeId> {
    p.blocks
        .iter()
        .try_fold(x, |h, block| residual_block(g, bind, h, block))
}

/// Fully connected map applied along axis 0: `[n_in, ...] -> [n_out, ...]`.
#[derive(Clone, Debug)]
pub struct DenseParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl DenseParams {
    pub fn init<S: Scalar>(
        store: &mut ParamStore<S>,
        init: &mut Initializer,
        name: &str,
        n_in: usize,
        n_out: usize,
    ) -> Result<Self> {
        let weight = init.weight(store, &format!("{name}.weight"), &[n_out, n_in], n_in)?;
        let bias = init.bias(store, &format!("{name}.bias"), n_out)?;
        Ok(DenseParams {
            weight,
            bias,
            n_in,
            n_out,
        })
    }
}

pub fn dense<S: Scalar>(g: &mut Graph<S>, bind: &Bindings, x: NodeId, p: &DenseParams) -> Result<NodeId> {
    let shape = g.shape(x);
    if shape.is_empty() || shape[0] != p.n_in {
        return Err(Error::shape("dense", shape, &[p.n_in]));
    }
    g.linear(x, bind[p.weight], Some(bind[p.bias]), 0)
}

/// Softmax over a vector (or along axis 0 of a batch).
pub fn softmax<S: Scalar>(g: &mut Graph<S>, v: NodeId) -> Result<NodeId> {
    g.softmax(v, 0)
}
