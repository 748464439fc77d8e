//! The point-conditioned box predictor: a small CNN backbone, transformer
//! encoder over the flattened feature grid (with sinusoidal grid codes added
//! at the input), a transformer decoder attending one query per annotated
//! point, and a shared 3-layer head that emits a normalized box per query
//! through a sigmoid.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Value};
use crate::data::{ImageSample, PointAnnotation};
use crate::encoding::{encode_grid, make_queries};
use crate::error::{Error, Result};
use crate::geometry::BoxCCWH;
use crate::nn::{Conv, DecoderLayer, EncoderLayer, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TeacherConfig {
    /// Model width; also the positional-code length.
    pub q: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    /// Backbone stage output channels; the last must equal `q`.
    pub backbone_channels: Vec<usize>,
    /// Per-stage strides; their product is the overall backbone stride.
    pub backbone_strides: Vec<usize>,
    /// Feed-forward hidden width as a multiple of `q`.
    pub ffn_mult: usize,
    pub temperature: f64,
    pub class_embed_scale: f64,
    /// Lower clamp for predicted width/height.
    pub wh_floor: f64,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        Self {
            q: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            backbone_channels: vec![8, 16, 32, 64],
            backbone_strides: vec![2, 2, 2, 1],
            ffn_mult: 4,
            temperature: 10_000.0,
            class_embed_scale: 0.02,
            wh_floor: 1e-4,
        }
    }
}

impl TeacherConfig {
    /// Reduced width/depth for gradient checks and fast tests.
    pub fn tiny() -> Self {
        Self {
            q: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            backbone_channels: vec![3, 4, 6, 8],
            backbone_strides: vec![2, 2, 2, 1],
            ffn_mult: 2,
            ..Default::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.backbone_strides.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        if self.q == 0 || self.q % 4 != 0 {
            return Err(Error::InvalidConfig(format!(
                "teacher width {} must be a positive multiple of 4",
                self.q
            )));
        }
        if self.heads == 0 || self.q % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "width {} not divisible into {} heads",
                self.q, self.heads
            )));
        }
        if self.backbone_channels.len() != self.backbone_strides.len()
            || self.backbone_channels.is_empty()
        {
            return Err(Error::InvalidConfig(
                "backbone channels/strides length mismatch".into(),
            ));
        }
        if *self.backbone_channels.last().unwrap() != self.q {
            return Err(Error::InvalidConfig(format!(
                "last backbone stage must emit q={} channels",
                self.q
            )));
        }
        if self.wh_floor <= 0.0 {
            return Err(Error::InvalidConfig("wh floor must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Layout {
    convs: Vec<Conv>,
    conv_norms: Vec<LayerNorm>,
    enc: Vec<EncoderLayer>,
    enc_norm: LayerNorm,
    dec: Vec<DecoderLayer>,
    dec_norm: LayerNorm,
    head: [Linear; 3],
    class_table: ParamId,
}

/// The teacher's parameters plus the structural layout to run them.
#[derive(Debug, Clone)]
pub struct TeacherModel {
    pub cfg: TeacherConfig,
    pub classes: usize,
    pub store: ParamStore,
    layout: Layout,
}

impl TeacherModel {
    /// Deterministic initialization from a seed.
    pub fn init(cfg: &TeacherConfig, classes: usize, seed: u64) -> Result<Self> {
        cfg.validate()?;
        if classes == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();

        let mut convs = Vec::new();
        let mut conv_norms = Vec::new();
        let mut in_c = 1;
        for (i, (&out_c, &stride)) in cfg
            .backbone_channels
            .iter()
            .zip(cfg.backbone_strides.iter())
            .enumerate()
        {
            convs.push(Conv::init(
                &mut store,
                &mut rng,
                &format!("backbone.{i}"),
                in_c,
                out_c,
                3,
                stride,
                1,
            ));
            conv_norms.push(LayerNorm::init(&mut store, &format!("backbone.{i}.ln"), out_c));
            in_c = out_c;
        }

        let ffn = cfg.ffn_mult * cfg.q;
        let enc = (0..cfg.enc_layers)
            .map(|i| EncoderLayer::init(&mut store, &mut rng, &format!("enc.{i}"), cfg.q, cfg.heads, ffn))
            .collect();
        let enc_norm = LayerNorm::init(&mut store, "enc.norm", cfg.q);
        let dec = (0..cfg.dec_layers)
            .map(|i| DecoderLayer::init(&mut store, &mut rng, &format!("dec.{i}"), cfg.q, cfg.heads, ffn))
            .collect();
        let dec_norm = LayerNorm::init(&mut store, "dec.norm", cfg.q);

        let head = [
            Linear::init(&mut store, &mut rng, "head.0", cfg.q, cfg.q),
            Linear::init(&mut store, &mut rng, "head.1", cfg.q, cfg.q),
            Linear::init(&mut store, &mut rng, "head.2", cfg.q, 4),
        ];
        // start near a mid-sized centered box: sigmoid(0)=0.5 for cx,cy and
        // a gentle negative bias for w,h
        {
            let b = store.get_mut(head[2].b);
            b[[0, 2]] = -1.5;
            b[[0, 3]] = -1.5;
        }

        let scale = cfg.class_embed_scale;
        let table = Array2::from_shape_fn((classes, cfg.q), |_| {
            let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            scale * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        });
        let class_table = store.add("class_embed", table);

        Ok(Self {
            cfg: cfg.clone(),
            classes,
            store,
            layout: Layout {
                convs,
                conv_norms,
                enc,
                enc_norm,
                dec,
                dec_norm,
                head,
                class_table,
            },
        })
    }

    /// Bind parameters onto a tape for one or more forwards whose gradients
    /// should accumulate together.
    pub fn bind<'m>(&'m self, tape: &mut Tape) -> BoundTeacher<'m> {
        let pv = self.store.bind(tape);
        BoundTeacher { model: self, pv }
    }

    /// Inference convenience: predicted boxes for one image, no gradients.
    pub fn predict(&self, img: &ImageSample, points: &[PointAnnotation]) -> Result<Vec<BoxCCWH>> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape);
        let out = bound.forward(&mut tape, img, points)?;
        let arr = tape.value(out);
        Ok((0..arr.nrows())
            .map(|i| {
                BoxCCWH::from_array([arr[[i, 0]], arr[[i, 1]], arr[[i, 2]], arr[[i, 3]]])
                    .expect("sigmoid output with floored extent is valid")
            })
            .collect())
    }
}

/// Differentiable interface shared by the real teacher and test stubs.
pub trait QueryBoxModel {
    /// Predict an `[M,4]` matrix of ccwh boxes, one row per input point.
    fn forward_boxes(
        &self,
        tape: &mut Tape,
        img: &ImageSample,
        points: &[PointAnnotation],
    ) -> Result<Value>;
}

/// A teacher with parameters bound to a specific tape.
pub struct BoundTeacher<'m> {
    model: &'m TeacherModel,
    pv: Vec<Value>,
}

impl<'m> BoundTeacher<'m> {
    pub fn param_values(&self) -> &[Value] {
        &self.pv
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        img: &ImageSample,
        points: &[PointAnnotation],
    ) -> Result<Value> {
        let cfg = &self.model.cfg;
        let lay = &self.model.layout;
        if points.is_empty() {
            return Err(Error::Empty("teacher forward needs at least one point".into()));
        }
        let (h, w) = (img.height(), img.width());
        let stride = cfg.stride();
        if h % stride != 0 || w % stride != 0 {
            return Err(Error::Shape(format!(
                "image {h}x{w} not divisible by backbone stride {stride}"
            )));
        }

        // backbone over [h*w, c] tokens
        let flat = Array2::from_shape_vec((h * w, 1), img.pixels.iter().copied().collect())
            .expect("row-major image");
        let mut x = tape.leaf(flat);
        let (mut ch, mut cw) = (h, w);
        for (conv, norm) in lay.convs.iter().zip(lay.conv_norms.iter()) {
            let (y, nh, nw) = conv.apply(tape, &self.pv, x, ch, cw);
            let y = norm.apply(tape, &self.pv, y);
            x = tape.relu(y);
            ch = nh;
            cw = nw;
        }

        // encoder with grid codes added at the input
        let grid = encode_grid(ch, cw, cfg.q, cfg.temperature)?;
        let mut mem = tape.add_const(x, &grid);
        for layer in &lay.enc {
            mem = layer.apply(tape, &self.pv, mem);
        }
        let mem = lay.enc_norm.apply(tape, &self.pv, mem);

        // decoder over point queries
        let pts: Vec<_> = points.iter().map(|p| (p.point, p.class_id)).collect();
        let mut q = make_queries(
            tape,
            self.pv[lay.class_table.0],
            self.model.classes,
            &pts,
            cfg.q,
            cfg.temperature,
        )?;
        for layer in &lay.dec {
            q = layer.apply(tape, &self.pv, q, mem);
        }
        let q = lay.dec_norm.apply(tape, &self.pv, q);

        // shared head -> sigmoid -> floor on w,h
        let mut t = q;
        for (i, lin) in lay.head.iter().enumerate() {
            t = lin.apply(tape, &self.pv, t);
            if i + 1 < lay.head.len() {
                t = tape.relu(t);
            }
        }
        let boxes = tape.sigmoid(t);
        let floor = Array2::from_shape_fn((points.len(), 4), |(_, j)| {
            if j >= 2 {
                cfg.wh_floor
            } else {
                0.0
            }
        });
        let floor = tape.leaf(floor);
        Ok(tape.max2(boxes, floor))
    }
}

impl QueryBoxModel for BoundTeacher<'_> {
    fn forward_boxes(
        &self,
        tape: &mut Tape,
        img: &ImageSample,
        points: &[PointAnnotation],
    ) -> Result<Value> {
        self.forward(tape, img, points)
    }
}
