//! Encode-process-decode message passing over a periodic grid graph.
//!
//! Node latents start from a per-cell MLP of the field channels, edge latents
//! from an MLP of the edge displacement features. Each processor layer
//! updates edges from `(edge, sender, receiver)` and nodes from
//! `(node, aggregated incoming edges)`, both residually. The decoder output is
//! added to the input field, so a zero decoder is an exact identity map.
//!
//! Node positions are not node inputs, which keeps the map equivariant under
//! lattice translations.

mod graph;
mod mlp;

pub use graph::{build_grid_graph, Connectivity, GridGraph};
pub use mlp::{Activation, Linear, Mlp, MlpGrads, MlpTrace};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::field::Field;
use crate::rng::{self, tag};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub ndim: usize,
    pub latent_channels: usize,
    pub hidden: usize,
    pub layers: usize,
    pub activation: Activation,
    pub connectivity: Connectivity,
    pub aggregation: Aggregation,
}

impl GnnConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(Error::config("at least one message-passing layer is required"));
        }
        if self.hidden < 1 || self.latent_channels < 1 {
            return Err(Error::config("hidden width and latent channels must be positive"));
        }
        if self.ndim < 1 {
            return Err(Error::config("graph dimension must be positive"));
        }
        Ok(())
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.ndim + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessorLayer {
    pub edge: Mlp,
    pub node: Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnParams {
    config: GnnConfig,
    pub node_encoder: Mlp,
    pub edge_encoder: Mlp,
    pub processors: Vec<ProcessorLayer>,
    pub node_decoder: Mlp,
}

impl GnnParams {
    /// Fan-in uniform initialization; the decoder's output layer starts at
    /// zero so the untrained model is the identity map.
    pub fn new(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::substream(seed, &[tag::GNN_INIT]);
        let (h, c, act) = (config.hidden, config.latent_channels, config.activation);
        let node_encoder = Mlp::new(c, h, h, act, &mut r);
        let edge_encoder = Mlp::new(config.edge_feature_dim(), h, h, act, &mut r);
        let processors = (0..config.layers)
            .map(|_| ProcessorLayer {
                edge: Mlp::new(3 * h, h, h, act, &mut r),
                node: Mlp::new(2 * h, h, h, act, &mut r),
            })
            .collect();
        let mut node_decoder = Mlp::new(h, h, c, act, &mut r);
        *node_decoder.layers.last_mut().unwrap() = Linear::zeros(h, c);
        Ok(GnnParams {
            config,
            node_encoder,
            edge_encoder,
            processors,
            node_decoder,
        })
    }

    pub fn config(&self) -> &GnnConfig {
        &self.config
    }

    fn mlps(&self) -> impl Iterator<Item = &Mlp> {
        std::iter::once(&self.node_encoder)
            .chain(std::iter::once(&self.edge_encoder))
            .chain(self.processors.iter().flat_map(|p| [&p.edge, &p.node]))
            .chain(std::iter::once(&self.node_decoder))
    }

    fn mlps_mut(&mut self) -> Vec<&mut Mlp> {
        let mut v = vec![&mut self.node_encoder, &mut self.edge_encoder];
        for p in &mut self.processors {
            v.push(&mut p.edge);
            v.push(&mut p.node);
        }
        v.push(&mut self.node_decoder);
        v
    }

    pub fn param_count(&self) -> usize {
        self.mlps().map(Mlp::param_count).sum()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        for m in self.mlps() {
            mlp::flatten_linears(&m.layers, out);
        }
    }

    pub fn load_flat(&mut self, values: &[f64]) -> usize {
        let mut at = 0;
        for m in self.mlps_mut() {
            at += mlp::load_linears(&mut m.layers, &values[at..]);
        }
        at
    }

    /// Checks MLP shapes against the config and that every weight is finite.
    pub fn validate(&self) -> Result<()> {
        self.config.validate()?;
        let (h, c) = (self.config.hidden, self.config.latent_channels);
        let check = |name: &str, m: &Mlp, i: usize, o: usize| -> Result<()> {
            if m.inputs() != i || m.outputs() != o {
                return Err(Error::shape(format!(
                    "{name} maps {}->{}, expected {i}->{o}",
                    m.inputs(),
                    m.outputs()
                )));
            }
            Ok(())
        };
        check("node encoder", &self.node_encoder, c, h)?;
        check("edge encoder", &self.edge_encoder, self.config.edge_feature_dim(), h)?;
        if self.processors.len() != self.config.layers {
            return Err(Error::shape("processor count differs from configured layers"));
        }
        for p in &self.processors {
            check("edge update", &p.edge, 3 * h, h)?;
            check("node update", &p.node, 2 * h, h)?;
        }
        check("node decoder", &self.node_decoder, h, c)?;
        let mut flat = Vec::new();
        self.flatten_into(&mut flat);
        if flat.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("non-finite GNN parameter"));
        }
        Ok(())
    }

    pub fn zero_grads(&self) -> GnnGrads {
        GnnGrads {
            node_encoder: self.node_encoder.zero_grads(),
            edge_encoder: self.edge_encoder.zero_grads(),
            processors: self
                .processors
                .iter()
                .map(|p| (p.edge.zero_grads(), p.node.zero_grads()))
                .collect(),
            node_decoder: self.node_decoder.zero_grads(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GnnGrads {
    pub node_encoder: MlpGrads,
    pub edge_encoder: MlpGrads,
    pub processors: Vec<(MlpGrads, MlpGrads)>,
    pub node_decoder: MlpGrads,
}

impl GnnGrads {
    /// Same order as [`GnnParams::flatten_into`].
    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        mlp::flatten_linears(&self.node_encoder.layers, out);
        mlp::flatten_linears(&self.edge_encoder.layers, out);
        for (e, n) in &self.processors {
            mlp::flatten_linears(&e.layers, out);
            mlp::flatten_linears(&n.layers, out);
        }
        mlp::flatten_linears(&self.node_decoder.layers, out);
    }
}

#[derive(Debug, Clone)]
struct LayerTrace {
    edge: MlpTrace,
    node: MlpTrace,
}

/// Activations from one forward pass.
#[derive(Debug, Clone)]
pub struct GnnTrace {
    dims: Vec<usize>,
    node_encoder: MlpTrace,
    edge_encoder: MlpTrace,
    layers: Vec<LayerTrace>,
    node_decoder: MlpTrace,
}

fn check_shapes(z: &Field, params: &GnnParams, graph: &GridGraph) -> Result<()> {
    let cfg = &params.config;
    if z.channels() != cfg.latent_channels {
        return Err(Error::shape(format!(
            "field has {} channels, node encoder expects {}",
            z.channels(),
            cfg.latent_channels
        )));
    }
    if z.cell_count() != graph.node_count() {
        return Err(Error::shape(format!(
            "field has {} cells, graph has {} nodes",
            z.cell_count(),
            graph.node_count()
        )));
    }
    if graph.edge_feature_dim() != cfg.edge_feature_dim() {
        return Err(Error::shape(format!(
            "graph edge features have {} entries, expected {}",
            graph.edge_feature_dim(),
            cfg.edge_feature_dim()
        )));
    }
    Ok(())
}

fn gather_edge_inputs(e: &DMatrix<f64>, v: &DMatrix<f64>, graph: &GridGraph) -> DMatrix<f64> {
    let h = e.nrows();
    let m = graph.edge_count();
    let mut out = DMatrix::zeros(3 * h, m);
    let (es, vs) = (e.as_slice(), v.as_slice());
    let dst = out.as_mut_slice();
    for k in 0..m {
        let (s, r) = (graph.senders()[k], graph.receivers()[k]);
        let col = &mut dst[k * 3 * h..(k + 1) * 3 * h];
        col[..h].copy_from_slice(&es[k * h..(k + 1) * h]);
        col[h..2 * h].copy_from_slice(&vs[s * h..(s + 1) * h]);
        col[2 * h..].copy_from_slice(&vs[r * h..(r + 1) * h]);
    }
    out
}

fn aggregate(e: &DMatrix<f64>, graph: &GridGraph, mode: Aggregation) -> DMatrix<f64> {
    let h = e.nrows();
    let mut agg = DMatrix::zeros(h, graph.node_count());
    let es = e.as_slice();
    let dst = agg.as_mut_slice();
    for r in 0..graph.node_count() {
        let col = &mut dst[r * h..(r + 1) * h];
        for k in graph.incoming(r) {
            for (a, x) in col.iter_mut().zip(&es[k * h..(k + 1) * h]) {
                *a += x;
            }
        }
        if mode == Aggregation::Mean && graph.in_degree(r) > 0 {
            let inv = 1.0 / graph.in_degree(r) as f64;
            col.iter_mut().for_each(|a| *a *= inv);
        }
    }
    agg
}

fn stack_rows(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ha, hb, n) = (a.nrows(), b.nrows(), a.ncols());
    let mut out = DMatrix::zeros(ha + hb, n);
    let (asl, bsl) = (a.as_slice(), b.as_slice());
    let dst = out.as_mut_slice();
    for j in 0..n {
        dst[j * (ha + hb)..j * (ha + hb) + ha].copy_from_slice(&asl[j * ha..(j + 1) * ha]);
        dst[j * (ha + hb) + ha..(j + 1) * (ha + hb)].copy_from_slice(&bsl[j * hb..(j + 1) * hb]);
    }
    out
}

fn forward_impl(z: &Field, params: &GnnParams, graph: &GridGraph, traced: bool) -> Result<(Field, Option<GnnTrace>)> {
    check_shapes(z, params, graph)?;
    let cfg = &params.config;
    let x0 = DMatrix::from_column_slice(cfg.latent_channels, z.cell_count(), z.data());
    let run = |m: &Mlp, x: &DMatrix<f64>| -> (DMatrix<f64>, Option<MlpTrace>) {
        if traced {
            let (y, t) = m.forward_traced(x);
            (y, Some(t))
        } else {
            (m.forward(x), None)
        }
    };
    let (mut v, t_nenc) = run(&params.node_encoder, &x0);
    let (mut e, t_eenc) = run(&params.edge_encoder, graph.edge_features());
    let mut layer_traces = Vec::new();
    for p in &params.processors {
        let edge_in = gather_edge_inputs(&e, &v, graph);
        let (msg, t_edge) = run(&p.edge, &edge_in);
        e += msg;
        let node_in = stack_rows(&v, &aggregate(&e, graph, cfg.aggregation));
        let (dv, t_node) = run(&p.node, &node_in);
        v += dv;
        if let (Some(edge), Some(node)) = (t_edge, t_node) {
            layer_traces.push(LayerTrace { edge, node });
        }
    }
    let (delta, t_dec) = run(&params.node_decoder, &v);
    let out = x0 + delta;
    let field = Field::from_vec(z.dims(), cfg.latent_channels, out.as_slice().to_vec())?;
    let trace = match (t_nenc, t_eenc, t_dec) {
        (Some(node_encoder), Some(edge_encoder), Some(node_decoder)) => Some(GnnTrace {
            dims: z.dims().to_vec(),
            node_encoder,
            edge_encoder,
            layers: layer_traces,
            node_decoder,
        }),
        _ => None,
    };
    Ok((field, trace))
}

/// One step `z_{t+1} = z_t + decoder(processor(encoder(z_t)))`.
pub fn gnn_forward(z: &Field, params: &GnnParams, graph: &GridGraph) -> Result<Field> {
    Ok(forward_impl(z, params, graph, false)?.0)
}

pub fn gnn_forward_traced(z: &Field, params: &GnnParams, graph: &GridGraph) -> Result<(Field, GnnTrace)> {
    let (f, t) = forward_impl(z, params, graph, true)?;
    Ok((f, t.expect("traced forward records activations")))
}

/// Reverse-mode pass. Accumulates parameter gradients into `grads` and
/// returns the gradient with respect to the input field.
pub fn gnn_backward(
    grad_out: &Field,
    trace: &GnnTrace,
    params: &GnnParams,
    graph: &GridGraph,
    grads: &mut GnnGrads,
) -> Result<Field> {
    let cfg = &params.config;
    if grad_out.channels() != cfg.latent_channels || grad_out.dims() != trace.dims.as_slice() {
        return Err(Error::shape("gradient shape differs from the traced forward output"));
    }
    let h = cfg.hidden;
    let g_out = DMatrix::from_column_slice(cfg.latent_channels, grad_out.cell_count(), grad_out.data());
    let mut g_v = params
        .node_decoder
        .backward(&trace.node_decoder, g_out.clone(), &mut grads.node_decoder);
    let mut g_e = DMatrix::<f64>::zeros(h, graph.edge_count());

    for (li, p) in params.processors.iter().enumerate().rev() {
        let lt = &trace.layers[li];
        let (g_edge_mlp, g_node_mlp) = {
            let (a, b) = &mut grads.processors[li];
            (a, b)
        };
        let g_node_in = p.node.backward(&lt.node, g_v.clone(), g_node_mlp);
        // split [V; agg]
        {
            let gi = g_node_in.as_slice();
            let gv = g_v.as_mut_slice();
            let ge = g_e.as_mut_slice();
            for r in 0..graph.node_count() {
                let col = &gi[r * 2 * h..(r + 1) * 2 * h];
                for (a, x) in gv[r * h..(r + 1) * h].iter_mut().zip(&col[..h]) {
                    *a += x;
                }
                let scale = match cfg.aggregation {
                    Aggregation::Sum => 1.0,
                    Aggregation::Mean if graph.in_degree(r) > 0 => 1.0 / graph.in_degree(r) as f64,
                    Aggregation::Mean => 0.0,
                };
                for k in graph.incoming(r) {
                    for (a, x) in ge[k * h..(k + 1) * h].iter_mut().zip(&col[h..]) {
                        *a += scale * x;
                    }
                }
            }
        }
        let g_edge_in = p.edge.backward(&lt.edge, g_e.clone(), g_edge_mlp);
        {
            let gi = g_edge_in.as_slice();
            let gv = g_v.as_mut_slice();
            let ge = g_e.as_mut_slice();
            for k in 0..graph.edge_count() {
                let col = &gi[k * 3 * h..(k + 1) * 3 * h];
                for (a, x) in ge[k * h..(k + 1) * h].iter_mut().zip(&col[..h]) {
                    *a += x;
                }
                let s = graph.senders()[k];
                for (a, x) in gv[s * h..(s + 1) * h].iter_mut().zip(&col[h..2 * h]) {
                    *a += x;
                }
                let r = graph.receivers()[k];
                for (a, x) in gv[r * h..(r + 1) * h].iter_mut().zip(&col[2 * h..]) {
                    *a += x;
                }
            }
        }
    }
    params
        .edge_encoder
        .backward(&trace.edge_encoder, g_e, &mut grads.edge_encoder);
    let g_x = params
        .node_encoder
        .backward(&trace.node_encoder, g_v, &mut grads.node_encoder);
    let g_in = g_out + g_x;
    Field::from_vec(grad_out.dims(), cfg.latent_channels, g_in.as_slice().to_vec())
}
