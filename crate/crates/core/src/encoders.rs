//! Two-stream sequence encoders and the next-visit predictor.
//!
//! Each stream (diagnoses, procedures) owns its code embedding matrix and its
//! encoder parameters. A visit is embedded as the mean of its code rows; the
//! encoder turns visits `1..=j` into `E^{i,j}`; the predictor maps
//! `concat(E_D, E_P)` to one logit per diagnosis code.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{multi_hot, PatientRecord};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Final hidden state of a single-layer LSTM.
    Lstm,
    /// Visit attention driven by a reverse-time recurrence (RETAIN-style).
    ReverseAttention,
    /// Location attention over a bidirectional recurrence (Dipole-style).
    BiAttention,
    /// Sum of visit embeddings. No recurrent parameters; useful for checking
    /// attributions against closed forms.
    Linear,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::Lstm => "lstm",
            ModelKind::ReverseAttention => "reverse_attention",
            ModelKind::BiAttention => "bi_attention",
            ModelKind::Linear => "linear",
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lstm" => Ok(ModelKind::Lstm),
            "reverse_attention" | "retain" => Ok(ModelKind::ReverseAttention),
            "bi_attention" | "dipole" => Ok(ModelKind::BiAttention),
            "linear" => Ok(ModelKind::Linear),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "N")]
    pub n: usize,
    pub r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Stream {
    Dx,
    Px,
}

impl Stream {
    fn prefix(self) -> &'static str {
        match self {
            Stream::Dx => "dx",
            Stream::Px => "px",
        }
    }
}

/// Parameter shapes for a model kind, in initialisation order.
fn param_layout(kind: ModelKind, dims: Dims) -> Vec<(String, Vec<usize>, bool)> {
    let Dims { m, n, r } = dims;
    let mut out = Vec::new();
    for (stream, vocab) in [(Stream::Dx, m), (Stream::Px, n)] {
        let p = stream.prefix();
        out.push((format!("{p}.embedding"), vec![vocab, r], false));
        match kind {
            ModelKind::Lstm => {
                out.push((format!("{p}.lstm.w_input"), vec![4 * r, r], false));
                out.push((format!("{p}.lstm.w_hidden"), vec![4 * r, r], false));
                out.push((format!("{p}.lstm.bias"), vec![4 * r], true));
            }
            ModelKind::ReverseAttention => {
                out.push((format!("{p}.rnn.w_input"), vec![r, r], false));
                out.push((format!("{p}.rnn.w_hidden"), vec![r, r], false));
                out.push((format!("{p}.rnn.bias"), vec![r], true));
                out.push((format!("{p}.attention.weight"), vec![r], false));
            }
            ModelKind::BiAttention => {
                for dir in ["fwd", "bwd"] {
                    out.push((format!("{p}.{dir}.w_input"), vec![r, r], false));
                    out.push((format!("{p}.{dir}.w_hidden"), vec![r, r], false));
                    out.push((format!("{p}.{dir}.bias"), vec![r], true));
                }
                out.push((format!("{p}.attention.weight"), vec![2 * r], false));
                out.push((format!("{p}.output.weight"), vec![r, 4 * r], false));
                out.push((format!("{p}.output.bias"), vec![r], true));
            }
            ModelKind::Linear => {}
        }
    }
    out.push(("predictor.weight".into(), vec![2 * r, m], false));
    out.push(("predictor.bias".into(), vec![m], true));
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub kind: ModelKind,
    pub dims: Dims,
    pub params: BTreeMap<String, Tensor>,
}

impl Model {
    /// Matrices uniform in `(-1/sqrt(r), 1/sqrt(r))`, biases zero.
    pub fn new(kind: ModelKind, dims: Dims, seed: u64) -> Result<Self> {
        if dims.m == 0 || dims.n == 0 || dims.r == 0 {
            return Err(Error::InvalidConfig(format!("model dimensions must be positive: {dims:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (dims.r as f64).sqrt();
        let params = param_layout(kind, dims)
            .into_iter()
            .map(|(name, shape, is_bias)| {
                let t = if is_bias {
                    Tensor::zeros(&shape)
                } else {
                    let len = shape.iter().product();
                    let data = (0..len).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::new(shape, data).expect("layout shapes are consistent")
                };
                (name, t)
            })
            .collect();
        Ok(Self { kind, dims, params })
    }

    /// Same layout with every parameter set to zero.
    pub fn zeros(kind: ModelKind, dims: Dims) -> Self {
        let params = param_layout(kind, dims)
            .into_iter()
            .map(|(name, shape, _)| (name, Tensor::zeros(&shape)))
            .collect();
        Self { kind, dims, params }
    }

    /// Checks that `params` has exactly the layout `kind` and `dims` require.
    pub fn from_params(kind: ModelKind, dims: Dims, params: BTreeMap<String, Tensor>) -> Result<Self> {
        let layout = param_layout(kind, dims);
        if layout.len() != params.len() {
            return Err(Error::InvalidConfig(format!(
                "{kind} model expects {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(Error::InvalidConfig(format!(
                        "parameter `{name}` has shape {:?}, expected {shape:?}",
                        t.shape()
                    )))
                }
                None => return Err(Error::InvalidConfig(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Self { kind, dims, params })
    }

    pub fn param(&self, name: &str) -> &Tensor {
        &self.params[name]
    }

    pub fn param_mut(&mut self, name: &str) -> &mut Tensor {
        self.params.get_mut(name).unwrap_or_else(|| panic!("no parameter `{name}`"))
    }

    /// Binds every parameter into `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|(k, t)| (k.clone(), g.param(t.clone()))).collect() }
    }

    /// Binds every parameter as a constant.
    pub fn bind_frozen(&self, g: &mut Graph) -> Bound {
        Bound { vars: self.params.iter().map(|(k, t)| (k.clone(), g.constant(t.clone()))).collect() }
    }

    /// Encodes both streams of `record` over visits `1..=prefix` and predicts
    /// the logits of visit `prefix + 1`.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        record: &PatientRecord,
        prefix: usize,
        dropout: Option<&mut Dropout<'_>>,
    ) -> Result<PrefixForward> {
        if prefix == 0 || prefix > record.len() {
            return Err(Error::InvalidRecord(format!(
                "prefix length {prefix} outside 1..={} for patient {}",
                record.len(),
                record.id
            )));
        }
        let dx = self.encode_stream(g, bound, record, prefix, Stream::Dx)?;
        let px = self.encode_stream(g, bound, record, prefix, Stream::Px)?;
        let (mut e_d, mut e_p) = (dx.output, px.output);
        if let Some(d) = dropout {
            e_d = d.apply(g, e_d, self.dims.r)?;
            e_p = d.apply(g, e_p, self.dims.r)?;
        }
        let logits = self.predictor_logits(g, bound, e_d, e_p)?;
        Ok(PrefixForward {
            e_d,
            e_p,
            logits,
            dx_visits: dx.visits,
            px_visits: px.visits,
            dx_attention: dx.attention,
            px_attention: px.attention,
        })
    }

    pub fn predictor_logits(&self, g: &mut Graph, bound: &Bound, e_d: Var, e_p: Var) -> Result<Var> {
        let r = self.dims.r;
        let joint = g.concat(&[e_d, e_p])?;
        let row = g.reshape(joint, &[1, 2 * r])?;
        let z = g.matmul(row, bound.get("predictor.weight"))?;
        let z = g.reshape(z, &[self.dims.m])?;
        Ok(g.add(z, bound.get("predictor.bias"))?)
    }

    pub fn encode_stream(
        &self,
        g: &mut Graph,
        bound: &Bound,
        record: &PatientRecord,
        prefix: usize,
        stream: Stream,
    ) -> Result<StreamEncoding> {
        if prefix == 0 {
            return Err(Error::InvalidRecord("prefix length must be at least 1".into()));
        }
        let p = stream.prefix();
        let vocab = match stream {
            Stream::Dx => self.dims.m,
            Stream::Px => self.dims.n,
        };
        let table = bound.get(&format!("{p}.embedding"));
        let visits = record.visits[..prefix]
            .iter()
            .map(|v| {
                let codes = match stream {
                    Stream::Dx => &v.dx,
                    Stream::Px => &v.px,
                };
                embed_visit_graph(g, codes, table, vocab)
            })
            .collect::<Result<Vec<_>>>()?;
        let (output, attention) = match self.kind {
            ModelKind::Lstm => (self.lstm(g, bound, p, &visits)?, None),
            ModelKind::ReverseAttention => {
                let (out, att) = self.reverse_attention(g, bound, p, &visits)?;
                (out, Some(att))
            }
            ModelKind::BiAttention => {
                let (out, att) = self.bi_attention(g, bound, p, &visits)?;
                (out, Some(att))
            }
            ModelKind::Linear => {
                let mut acc = visits[0];
                for &v in &visits[1..] {
                    acc = g.add(acc, v)?;
                }
                (acc, None)
            }
        };
        Ok(StreamEncoding { output, visits, attention })
    }

    fn lstm(&self, g: &mut Graph, bound: &Bound, p: &str, visits: &[Var]) -> Result<Var> {
        let r = self.dims.r;
        let w_in = bound.get(&format!("{p}.lstm.w_input"));
        let w_hid = bound.get(&format!("{p}.lstm.w_hidden"));
        let bias = bound.get(&format!("{p}.lstm.bias"));
        let mut h = g.constant(Tensor::zeros(&[r]));
        let mut c = g.constant(Tensor::zeros(&[r]));
        for &x in visits {
            let zx = g.matmul(w_in, x)?;
            let zh = g.matmul(w_hid, h)?;
            let z = g.add(zx, zh)?;
            let z = g.add(z, bias)?;
            let zi = g.slice(z, 0, r)?;
            let zf = g.slice(z, r, r)?;
            let zg = g.slice(z, 2 * r, r)?;
            let zo = g.slice(z, 3 * r, r)?;
            let i = g.sigmoid(zi)?;
            let f = g.sigmoid(zf)?;
            let cand = g.tanh(zg)?;
            let o = g.sigmoid(zo)?;
            let keep = g.mul(f, c)?;
            let write = g.mul(i, cand)?;
            c = g.add(keep, write)?;
            let tc = g.tanh(c)?;
            h = g.mul(o, tc)?;
        }
        Ok(h)
    }

    fn elman_step(&self, g: &mut Graph, w_in: Var, w_hid: Var, bias: Var, x: Var, h: Var) -> Result<Var> {
        let a = g.matmul(w_in, x)?;
        let b = g.matmul(w_hid, h)?;
        let s = g.add(a, b)?;
        let s = g.add(s, bias)?;
        Ok(g.tanh(s)?)
    }

    fn attend(&self, g: &mut Graph, weight: Var, states: &[Var], values: &[Var], width: usize) -> Result<(Var, Var)> {
        let mut scores = Vec::with_capacity(states.len());
        for &s in states {
            let prod = g.mul(weight, s)?;
            scores.push(g.sum(prod)?);
        }
        let scores = g.concat(&scores)?;
        let alpha = g.softmax(scores)?;
        let rows = values.iter().map(|&v| g.reshape(v, &[1, width])).collect::<Result<Vec<_>, _>>()?;
        let stacked = g.concat(&rows)?;
        let alpha_row = g.reshape(alpha, &[1, values.len()])?;
        let ctx = g.matmul(alpha_row, stacked)?;
        Ok((g.reshape(ctx, &[width])?, alpha))
    }

    fn reverse_attention(&self, g: &mut Graph, bound: &Bound, p: &str, visits: &[Var]) -> Result<(Var, Var)> {
        let r = self.dims.r;
        let w_in = bound.get(&format!("{p}.rnn.w_input"));
        let w_hid = bound.get(&format!("{p}.rnn.w_hidden"));
        let bias = bound.get(&format!("{p}.rnn.bias"));
        let att = bound.get(&format!("{p}.attention.weight"));
        let mut h = g.constant(Tensor::zeros(&[r]));
        let mut states = vec![h; visits.len()];
        for k in (0..visits.len()).rev() {
            h = self.elman_step(g, w_in, w_hid, bias, visits[k], h)?;
            states[k] = h;
        }
        self.attend(g, att, &states, visits, r)
    }

    fn bi_attention(&self, g: &mut Graph, bound: &Bound, p: &str, visits: &[Var]) -> Result<(Var, Var)> {
        let r = self.dims.r;
        let j = visits.len();
        let get = |name: &str| bound.get(&format!("{p}.{name}"));
        let zero = g.constant(Tensor::zeros(&[r]));
        let mut fwd = Vec::with_capacity(j);
        let mut h = zero;
        for &x in visits {
            h = self.elman_step(g, get("fwd.w_input"), get("fwd.w_hidden"), get("fwd.bias"), x, h)?;
            fwd.push(h);
        }
        let mut bwd = vec![zero; j];
        let mut h = zero;
        for k in (0..j).rev() {
            h = self.elman_step(g, get("bwd.w_input"), get("bwd.w_hidden"), get("bwd.bias"), visits[k], h)?;
            bwd[k] = h;
        }
        let states = (0..j).map(|k| g.concat(&[fwd[k], bwd[k]])).collect::<Result<Vec<_>, _>>()?;
        let (ctx, alpha) = self.attend(g, get("attention.weight"), &states, &states, 2 * r)?;
        let joint = g.concat(&[ctx, states[j - 1]])?;
        let out = g.matmul(get("output.weight"), joint)?;
        let out = g.add(out, get("output.bias"))?;
        Ok((g.tanh(out)?, alpha))
    }

    /// Per-code probabilities for one prediction point, without recording gradients.
    pub fn predict_point(&self, record: &PatientRecord, prefix: usize) -> Result<Vec<f64>> {
        let logits = self.logits_point(record, prefix)?;
        Ok(logits.into_iter().map(crate::tensor::sigmoid).collect())
    }

    pub fn logits_point(&self, record: &PatientRecord, prefix: usize) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let fw = self.forward(&mut g, &bound, record, prefix, None)?;
        Ok(g.value(fw.logits).data().to_vec())
    }

    /// `(E_D, E_P)` for one prediction point, without recording gradients.
    pub fn embed_point(&self, record: &PatientRecord, prefix: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let d = self.encode_stream(&mut g, &bound, record, prefix, Stream::Dx)?;
        let p = self.encode_stream(&mut g, &bound, record, prefix, Stream::Px)?;
        Ok((g.value(d.output).data().to_vec(), g.value(p.output).data().to_vec()))
    }
}

/// Parameter name to graph leaf.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds parameters to leaves created by the caller.
    pub fn from_vars(vars: BTreeMap<String, Var>) -> Self {
        Self { vars }
    }

    pub fn get(&self, name: &str) -> Var {
        *self.vars.get(name).unwrap_or_else(|| panic!("parameter `{name}` not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gradient table keyed by parameter name.
    pub fn gradients(&self, grads: &crate::tensor::Gradients) -> BTreeMap<String, Tensor> {
        self.vars.iter().map(|(k, v)| (k.clone(), grads.get(*v))).collect()
    }
}

pub struct StreamEncoding {
    pub output: Var,
    pub visits: Vec<Var>,
    pub attention: Option<Var>,
}

pub struct PrefixForward {
    pub e_d: Var,
    pub e_p: Var,
    pub logits: Var,
    pub dx_visits: Vec<Var>,
    pub px_visits: Vec<Var>,
    pub dx_attention: Option<Var>,
    pub px_attention: Option<Var>,
}

/// Inverted dropout on stream embeddings.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply(&mut self, g: &mut Graph, x: Var, len: usize) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let mask = (0..len).map(|_| if self.rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let mask = g.constant(Tensor::vector(mask));
        Ok(g.mul(x, mask)?)
    }
}

fn check_codes(codes: &[usize], vocab: usize) -> Result<()> {
    if codes.is_empty() {
        return Err(Error::InvalidRecord("visit has an empty code set".into()));
    }
    if let Some(c) = codes.iter().find(|&&c| c >= vocab) {
        return Err(Error::InvalidRecord(format!("code {c} outside vocabulary of size {vocab}")));
    }
    Ok(())
}

/// Mean of the embedding rows selected by `codes`.
pub fn embed_visit(codes: &[usize], embedding: &Tensor) -> Result<Vec<f64>> {
    check_codes(codes, embedding.rows())?;
    let r = embedding.cols();
    let mut out = vec![0.0; r];
    for &c in codes {
        for (o, v) in out.iter_mut().zip(embedding.row(c)) {
            *o += v;
        }
    }
    let k = codes.len() as f64;
    out.iter_mut().for_each(|o| *o /= k);
    Ok(out)
}

/// In-graph [`embed_visit`]: a `1×vocab` averaging row times the table.
pub fn embed_visit_graph(g: &mut Graph, codes: &[usize], table: Var, vocab: usize) -> Result<Var> {
    check_codes(codes, vocab)?;
    let mut sel = multi_hot(codes, vocab);
    let k = codes.len() as f64;
    sel.iter_mut().for_each(|s| *s /= k);
    let sel = g.constant(Tensor::matrix(1, vocab, sel)?);
    let row = g.matmul(sel, table)?;
    let r = g.shape(row)[1];
    Ok(g.reshape(row, &[r])?)
}

/// Mean binary cross-entropy over codes with probabilities clamped to
/// `[1e-12, 1 - 1e-12]`.
pub fn prediction_loss(probabilities: &[f64], target: &[f64]) -> Result<f64> {
    if probabilities.len() != target.len() || target.is_empty() {
        return Err(Error::InvalidRecord(format!(
            "{} probabilities for a target of length {}",
            probabilities.len(),
            target.len()
        )));
    }
    if target.iter().any(|&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidRecord("target must be multi-hot (0/1)".into()));
    }
    const CLAMP: f64 = 1e-12;
    let total: f64 = probabilities
        .iter()
        .zip(target)
        .map(|(&p, &y)| {
            let p = p.clamp(CLAMP, 1.0 - CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / target.len() as f64)
}

/// `sigmoid(weight^T concat(e_d, e_p) + bias)` on plain vectors.
pub fn predict_next(model: &Model, e_d: &[f64], e_p: &[f64]) -> Result<Vec<f64>> {
    let r = model.dims.r;
    if e_d.len() != r || e_p.len() != r {
        return Err(Error::InvalidRecord(format!(
            "embeddings of length {} and {}, expected {r}",
            e_d.len(),
            e_p.len()
        )));
    }
    let mut g = Graph::new();
    let bound = model.bind_frozen(&mut g);
    let d = g.constant(Tensor::vector(e_d.to_vec()));
    let p = g.constant(Tensor::vector(e_p.to_vec()));
    let z = model.predictor_logits(&mut g, &bound, d, p)?;
    Ok(g.value(z).data().iter().map(|&x| crate::tensor::sigmoid(x)).collect())
}
