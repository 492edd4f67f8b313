//! Small parameterized layers on top of [`crate::autodiff`].

use rand::Rng;

use crate::autodiff::{ConvSpec, Graph, ParamId, ParamStore, Var};

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), fan_in, fan_out, rng),
            b: store.add_bias(format!("{name}.b"), fan_out, 0.0),
        }
    }

    /// Linear layer with small weights, for output heads.
    pub fn new_head(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let l = Self::new(store, name, fan_in, fan_out, rng);
        store.get_mut(l.w).data.iter_mut().for_each(|v| *v *= 0.1);
        l
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.matmul(x, w);
        g.add_row_bias(y, b)
    }
}

/// Stack of linear layers with ReLU between them (and after the last one
/// when `final_relu`).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub final_relu: bool,
}

impl Mlp {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, widths: &[usize], final_relu: bool, rng: &mut impl Rng) -> Self {
        let mut layers = Vec::new();
        let mut f = fan_in;
        for (i, &w) in widths.iter().enumerate() {
            layers.push(Linear::new(store, &format!("{name}.{i}"), f, w, rng));
            f = w;
        }
        Self { layers, final_relu }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        let n = self.layers.len();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.forward(g, store, h);
            if i + 1 < n || self.final_relu {
                h = g.relu(h);
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: store.add_weight(format!("{name}.w"), kernel * kernel * cin, cout, rng),
            b: store.add_bias(format!("{name}.b"), cout, 0.0),
            kernel,
            stride,
        }
    }

    /// Returns the output and its spatial dims.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> (Var, usize, usize) {
        let spec = ConvSpec {
            height,
            width,
            kernel: self.kernel,
            stride: self.stride,
        };
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let (ho, wo) = spec.out_dims();
        (g.conv2d(x, w, b, spec), ho, wo)
    }
}

/// 1x1 projection followed by nearest-neighbour upsampling by `stride`.
#[derive(Debug, Clone, Copy)]
pub struct Upsample {
    pub proj: Linear,
    pub stride: usize,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, stride: usize, rng: &mut impl Rng) -> Self {
        Self {
            proj: Linear::new(store, name, cin, cout, rng),
            stride,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> Var {
        let y = self.proj.forward(g, store, x);
        if self.stride == 1 {
            return y;
        }
        let s = self.stride;
        let wo = width * s;
        let idx: Vec<usize> = (0..height * s * wo).map(|o| (o / wo / s) * width + (o % wo) / s).collect();
        g.gather_rows(y, &idx)
    }
}
