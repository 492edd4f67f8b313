//! PointPillars-style 2D backbone: strided conv stages, each upsampled back to
//! the output resolution and concatenated along channels.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamStore, Var};
use crate::error::{invalid, Result};
use crate::nn::{Conv, Upsample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Output stride relative to the pillar grid (stride of the first stage).
    pub stride: usize,
    /// Channel width of each stage; stages after the first downsample by 2.
    pub channels: Vec<usize>,
    /// Extra stride-1 convolutions per stage.
    pub layers: Vec<usize>,
    /// Channels of each stage after upsampling; the output width is their sum.
    pub up_channels: Vec<usize>,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            stride: 1,
            channels: vec![64, 128, 256],
            layers: vec![1, 1, 1],
            up_channels: vec![128, 128, 128],
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.channels.len();
        if n == 0 || self.layers.len() != n || self.up_channels.len() != n {
            return invalid("backbone channels, layers and up_channels must have equal non-zero length");
        }
        if self.stride == 0 || self.channels.iter().chain(&self.up_channels).any(|&c| c == 0) {
            return invalid("backbone widths and stride must be positive");
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.up_channels.iter().sum()
    }

    /// Total downsampling of the deepest stage; map sides must divide by it.
    pub fn total_stride(&self) -> usize {
        self.stride << (self.channels.len() - 1)
    }
}

#[derive(Debug, Clone)]
struct Stage {
    convs: Vec<Conv>,
    up: Upsample,
}

#[derive(Debug, Clone)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub in_channels: usize,
    stages: Vec<Stage>,
}

impl Backbone {
    pub fn new(store: &mut ParamStore, prefix: &str, cfg: &BackboneConfig, in_channels: usize, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let mut stages = Vec::new();
        let mut cin = in_channels;
        for (s, &c) in cfg.channels.iter().enumerate() {
            let stride = if s == 0 { cfg.stride } else { 2 };
            let mut convs = vec![Conv::new(store, &format!("{prefix}.s{s}.c0"), cin, c, 3, stride, rng)];
            for l in 0..cfg.layers[s] {
                convs.push(Conv::new(store, &format!("{prefix}.s{s}.c{}", l + 1), c, c, 3, 1, rng));
            }
            let up = Upsample::new(store, &format!("{prefix}.s{s}.up"), c, cfg.up_channels[s], 1 << s, rng);
            stages.push(Stage { convs, up });
            cin = c;
        }
        Ok(Self {
            cfg: cfg.clone(),
            in_channels,
            stages,
        })
    }

    /// `x` is an `(height*width) x in_channels` map. Returns the
    /// `(height/stride * width/stride) x out_channels` feature map.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, height: usize, width: usize) -> Result<Var> {
        let ts = self.cfg.total_stride();
        if height % ts != 0 || width % ts != 0 {
            return invalid(format!("map {height}x{width} not divisible by backbone stride {ts}"));
        }
        if g.shape(x) != [height * width, self.in_channels] {
            return invalid(format!(
                "backbone input {:?}, expected [{}, {}]",
                g.shape(x),
                height * width,
                self.in_channels
            ));
        }
        let (mut h, mut w, mut cur) = (height, width, x);
        let mut outs = Vec::new();
        for st in &self.stages {
            for conv in &st.convs {
                let (y, ho, wo) = conv.forward(g, store, cur, h, w);
                cur = g.relu(y);
                h = ho;
                w = wo;
            }
            let u = st.up.forward(g, store, cur, h, w);
            outs.push(g.relu(u));
        }
        Ok(if outs.len() == 1 { outs[0] } else { g.concat_cols(&outs) })
    }
}
