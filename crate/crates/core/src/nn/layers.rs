use super::params::{Init, ParamId, ParamStore};
use super::tape::{Tape, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Affine map `x W + b`, weights stored as `d_in x d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    /// Registers weights with the usual `U(-1/sqrt(d_in), 1/sqrt(d_in))` initializer.
    pub fn new(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Self {
        let bound = 1.0 / (d_in as f64).sqrt();
        let weight = store.add(format!("{prefix}.weight"), (d_in, d_out), Init::Uniform(bound));
        let bias = bias.then(|| store.add(format!("{prefix}.bias"), (1, d_out), Init::Uniform(bound)));
        Self {
            weight,
            bias,
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.weight);
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.affine(x, w, b)
            }
            None => tape.matmul(x, w),
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        std::iter::once(self.weight).chain(self.bias).collect()
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, prefix: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), (1, width), Init::Constant(1.0)),
            bias: store.add(format!("{prefix}.bias"), (1, width), Init::Constant(0.0)),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Fully connected network with ReLU between layers and a linear output.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths` lists every layer width including input and output.
    pub fn new(store: &mut ParamStore, prefix: &str, widths: &[usize]) -> Self {
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{prefix}.fc{i}"), w[0], w[1], true))
            .collect();
        Self { layers }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, store, h);
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        h
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w: Vec<usize> = self.layers.iter().map(|l| l.d_in).collect();
        if let Some(last) = self.layers.last() {
            w.push(last.d_out);
        }
        w
    }
}
