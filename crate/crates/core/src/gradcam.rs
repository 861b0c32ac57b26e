//! 1-D Grad-CAM at the attention sub-module outputs, plus CSV/SVG export.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::model::{resample_linear, AffectDim, LabeledExample, SignalError};
use crate::rtcan::{RtcanError, RtcanModel};
use crate::tensor::{Tape, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum GradcamError {
    #[error("layer '{0}' is not recorded by this model")]
    UnknownLayer(String),
    #[error("target class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("invalid example: {0}")]
    BadExample(String),
    #[error(transparent)]
    Rtcan(#[from] RtcanError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Signal(#[from] SignalError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Layer {
    ScaOut,
    RntaOut,
    AttentionOut,
}

impl Layer {
    pub const ALL: [Layer; 3] = [Layer::ScaOut, Layer::RntaOut, Layer::AttentionOut];

    pub fn as_str(&self) -> &'static str {
        match self {
            Layer::ScaOut => "sca_out",
            Layer::RntaOut => "rnta_out",
            Layer::AttentionOut => "attention_out",
        }
    }
}

impl std::str::FromStr for Layer {
    type Err = GradcamError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Layer::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| GradcamError::UnknownLayer(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyMap {
    pub target_class: usize,
    pub layer: Layer,
    /// One weight per input sample, in [0, 1].
    pub weights: Vec<f64>,
}

/// Stitches per-clip `[1, C, T]` values (or gradients) into `C` rows of
/// length `sum T`.
fn stitch(parts: &[(Vec<f64>, usize, usize)]) -> (usize, usize, Vec<Vec<f64>>) {
    let c = parts[0].1;
    let total: usize = parts.iter().map(|p| p.2).sum();
    let mut rows = vec![Vec::with_capacity(total); c];
    for (data, _, t) in parts {
        for (ch, row) in rows.iter_mut().enumerate() {
            row.extend_from_slice(&data[ch * t..(ch + 1) * t]);
        }
    }
    (c, total, rows)
}

fn collect(tape: &Tape, vars: &[Var], grads: bool) -> Result<Vec<(Vec<f64>, usize, usize)>, GradcamError> {
    vars.iter()
        .map(|&v| {
            let (b, c, t) = match tape.shape(v) {
                &[b, c, t] => (b, c, t),
                s => return Err(GradcamError::BadExample(format!("feature map shape {s:?}"))),
            };
            if b != 1 {
                return Err(GradcamError::BadExample("expected batch of one".into()));
            }
            let data = if grads {
                tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; c * t])
            } else {
                tape.data(v).to_vec()
            };
            Ok((data, c, t))
        })
        .collect()
}

/// Min-max normalization of a non-negative map; all-zero stays all-zero and
/// a constant positive map becomes all ones.
fn normalize(map: &mut [f64]) {
    let max = map.iter().copied().fold(0.0f64, f64::max);
    if max <= 0.0 {
        map.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let min = map.iter().copied().fold(f64::INFINITY, f64::min);
    let span = max - min;
    if span <= max * 1e-12 {
        map.iter_mut().for_each(|v| *v = 1.0);
    } else {
        map.iter_mut().for_each(|v| *v = ((*v - min) / span).clamp(0.0, 1.0));
    }
}

/// Grad-CAM map of `target_class` at `layer`: relu of the channel sum of the
/// activations weighted by their time-averaged logit gradients, upsampled to
/// the input length and normalized.
pub fn gradcam_1d(
    model: &RtcanModel,
    example: &LabeledExample,
    layer: Layer,
    target_class: usize,
) -> Result<SaliencyMap, GradcamError> {
    let cfg = &model.config;
    if target_class >= cfg.num_classes {
        return Err(GradcamError::BadClass {
            class: target_class,
            classes: cfg.num_classes,
        });
    }
    let len = example.input_len();
    if len != cfg.input_len || example.channels.iter().any(|c| c.len() != len) {
        return Err(GradcamError::BadExample(format!(
            "example length {len}, model expects {}",
            cfg.input_len
        )));
    }
    let x = Tensor::new(vec![1, 3, len], example.channels.iter().flatten().copied().collect())?;
    let music = match (cfg.music_dim, &example.music) {
        (0, _) => None,
        (d, Some(m)) if m.len() == d => Some(Tensor::new(vec![1, d], m.clone())?),
        (d, _) => {
            return Err(GradcamError::BadExample(format!("model expects {d} stimulus features")));
        }
    };

    let mut tape = Tape::new();
    let vars = model.params.attach(&mut tape);
    let mut ctx = model.eval_ctx(&mut tape, &vars);
    let x = ctx.tape.constant(x);
    let music = music.map(|m| ctx.tape.constant(m));
    let out = ctx.model_forward(x, music)?;
    let maps: Vec<Var> = match layer {
        Layer::ScaOut => out.taps.sca_out.clone(),
        Layer::RntaOut => out.taps.rnta_out.clone(),
        Layer::AttentionOut => out.taps.attention_out.into_iter().collect(),
    };
    if maps.is_empty() {
        return Err(GradcamError::UnknownLayer(format!(
            "{} (attention order {:?})",
            layer.as_str(),
            cfg.attention_order
        )));
    }
    let mut seed = vec![0.0; cfg.num_classes];
    seed[target_class] = 1.0;
    tape.backward_with_seed(out.logits, seed)?;

    let (c, t, acts) = stitch(&collect(&tape, &maps, false)?);
    let (_, _, grads) = stitch(&collect(&tape, &maps, true)?);
    let alpha: Vec<f64> = grads.iter().map(|g| g.iter().sum::<f64>() / t as f64).collect();
    let mut cam = vec![0.0; t];
    for ch in 0..c {
        for (v, a) in cam.iter_mut().zip(&acts[ch]) {
            *v += alpha[ch] * a;
        }
    }
    cam.iter_mut().for_each(|v| *v = v.max(0.0));
    let mut weights = if t == len { cam } else { resample_linear(&cam, len)? };
    weights.iter_mut().for_each(|v| *v = v.max(0.0));
    normalize(&mut weights);
    Ok(SaliencyMap {
        target_class,
        layer,
        weights,
    })
}

/// Base file name `<subject>_<stimulus>_<dim>_<layers>` (layers joined by `-`).
pub fn plot_stem(example: &LabeledExample, dim: AffectDim, maps: &[SaliencyMap]) -> String {
    let layers: Vec<&str> = maps.iter().map(|m| m.layer.as_str()).collect();
    format!(
        "{}_{}_{}_{}",
        example.subject_id,
        example.stimulus_id,
        dim.as_str(),
        layers.join("-")
    )
}

/// Writes `<stem>.csv` and `<stem>.svg` into `out_dir` and returns both paths.
pub fn emit_plot(
    example: &LabeledExample,
    maps: &[SaliencyMap],
    dim: AffectDim,
    out_dir: &Path,
) -> Result<(PathBuf, PathBuf), GradcamError> {
    let len = example.input_len();
    if maps.is_empty() {
        return Err(GradcamError::BadExample("no saliency maps to plot".into()));
    }
    for m in maps {
        if m.weights.len() != len || m.weights.iter().any(|w| !(0.0..=1.0).contains(w)) {
            return Err(GradcamError::BadExample(format!("{} map is not normalized", m.layer.as_str())));
        }
    }
    let stem = plot_stem(example, dim, maps);
    let csv_path = out_dir.join(format!("{stem}.csv"));
    let svg_path = out_dir.join(format!("{stem}.svg"));

    let t: Vec<f64> = (0..len).map(|i| i as f64).collect();
    let mut names = vec!["t".to_string(), "origin".into(), "phasic".into(), "tonic".into()];
    names.extend(maps.iter().map(|m| format!("weight_{}", m.layer.as_str())));
    let mut columns: Vec<&[f64]> = vec![&t, &example.channels[0], &example.channels[1], &example.channels[2]];
    columns.extend(maps.iter().map(|m| m.weights.as_slice()));
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    io::write_columns(io::create(&csv_path)?, &names, &columns)?;

    std::fs::write(&svg_path, render_svg(example, maps)).map_err(|source| IoError::File {
        path: svg_path.display().to_string(),
        source,
    })?;
    Ok((csv_path, svg_path))
}

const WIDTH: f64 = 900.0;
const PANEL_H: f64 = 220.0;
const MARGIN: f64 = 30.0;
const COLORS: [&str; 3] = ["#1f1f1f", "#d62728", "#1f77b4"];

/// One panel per map: saliency as columns behind the three signal curves.
pub fn render_svg(example: &LabeledExample, maps: &[SaliencyMap]) -> String {
    let len = example.input_len().max(1);
    let height = PANEL_H * maps.len() as f64;
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = PANEL_H - 2.0 * MARGIN;
    let dx = plot_w / len as f64;
    let (lo, hi) = example
        .channels
        .iter()
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    for (p, map) in maps.iter().enumerate() {
        let top = p as f64 * PANEL_H + MARGIN;
        let _ = writeln!(s, r#"<g class="panel" id="panel-{}">"#, map.layer.as_str());
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{:.1}" font-family="sans-serif" font-size="12">{} {} class {}</text>"#,
            top - 8.0,
            xml_escape(&format!("{}/{}", example.subject_id, example.stimulus_id)),
            map.layer.as_str(),
            map.target_class
        );
        let _ = writeln!(
            s,
            r##"<rect class="frame" x="{MARGIN}" y="{top:.1}" width="{plot_w:.1}" height="{plot_h:.1}" fill="none" stroke="#888"/>"##
        );
        for (i, &w) in map.weights.iter().enumerate() {
            if w <= 0.0 {
                continue;
            }
            let _ = writeln!(
                s,
                r##"<rect class="saliency" x="{:.2}" y="{top:.1}" width="{:.2}" height="{plot_h:.1}" fill="#ff9900" fill-opacity="{:.4}"/>"##,
                MARGIN + i as f64 * dx,
                dx,
                0.8 * w
            );
        }
        for (ch, color) in example.channels.iter().zip(COLORS) {
            let pts: Vec<String> = ch
                .iter()
                .enumerate()
                .map(|(i, v)| {
                    let x = MARGIN + (i as f64 + 0.5) * dx;
                    let y = top + plot_h - (v - lo) / span * plot_h;
                    format!("{x:.2},{y:.2}")
                })
                .collect();
            let _ = writeln!(
                s,
                r#"<polyline class="signal" fill="none" stroke="{color}" stroke-width="1" points="{}"/>"#,
                pts.join(" ")
            );
        }
        s.push_str("</g>\n");
    }
    s.push_str("</svg>\n");
    s
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
