//! Tri-branch segmentation network: one shared encoder and three decoders
//! (ECB, EPB, EFB) that differ in their upsampling style. Every decoder ends
//! in a 1x1 convolution followed by softplus, so its output is evidence.
//!
//! Weight files hold a text manifest followed by the parameters as
//! concatenated `ETNS` tensors:
//!
//! ```text
//! etc-weights 1 <count>
//! <name> <dim> <dim> ...      (count lines, in parameter order)
//! ETNS ... ETNS ...
//! ```

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Graph, Var};
use crate::error::{EtcError, Result};
use crate::tensor::Tensor;

pub const BRANCHES: [&str; 3] = ["ecb", "epb", "efb"];
pub const DEFAULT_WIDTHS: [usize; 3] = [16, 32, 64];
/// Head bias at initialization; keeps initial evidence small so `u` starts
/// near 1.
pub const HEAD_BIAS_INIT: f64 = -2.0;
/// Head weights start at this fraction of the He scale for the same reason.
pub const HEAD_WEIGHT_SCALE: f64 = 0.1;

const WEIGHTS_HEADER: &str = "etc-weights";
const WEIGHTS_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Upsample {
    Transposed,
    Bilinear,
    Nearest,
}

impl Upsample {
    pub fn for_branch(branch: usize) -> Self {
        match branch {
            0 => Upsample::Transposed,
            1 => Upsample::Bilinear,
            _ => Upsample::Nearest,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TriBranchNet {
    classes: usize,
    widths: [usize; 3],
    params: Vec<Param>,
}

/// Evidence fields of the three branches, in ECB, EPB, EFB order.
#[derive(Clone, Copy, Debug)]
pub struct BranchVars {
    pub evidence: [Var; 3],
}

/// Names and shapes of every parameter, in storage order.
pub fn layout(classes: usize, widths: [usize; 3]) -> Vec<(String, Vec<usize>)> {
    fn push(out: &mut Vec<(String, Vec<usize>)>, name: String, weight: Vec<usize>, bias: usize) {
        out.push((format!("{name}.weight"), weight));
        out.push((format!("{name}.bias"), vec![bias]));
    }
    let mut out = Vec::new();
    let [w0, w1, w2] = widths;
    for (s, (cin, cout)) in [(1, w0), (w0, w1), (w1, w2)].into_iter().enumerate() {
        push(
            &mut out,
            format!("enc{s}.conv0"),
            vec![cout, cin, 3, 3],
            cout,
        );
        push(
            &mut out,
            format!("enc{s}.conv1"),
            vec![cout, cout, 3, 3],
            cout,
        );
    }
    for (b, name) in BRANCHES.iter().enumerate() {
        for (l, (cin, cout)) in [(w2, w1), (w1, w0)].into_iter().enumerate() {
            let up = format!("{name}.up{l}");
            let proj = match Upsample::for_branch(b) {
                // transposed weights are (in, out, k, k)
                Upsample::Transposed => vec![cin, cout, 2, 2],
                _ => vec![cout, cin, 3, 3],
            };
            push(&mut out, format!("{up}.proj"), proj, cout);
            push(
                &mut out,
                format!("{up}.conv0"),
                vec![cout, 2 * cout, 3, 3],
                cout,
            );
            push(
                &mut out,
                format!("{up}.conv1"),
                vec![cout, cout, 3, 3],
                cout,
            );
        }
        push(
            &mut out,
            format!("{name}.head"),
            vec![classes, w0, 1, 1],
            classes,
        );
    }
    out
}

fn fan_in(name: &str, shape: &[usize]) -> usize {
    if name.starts_with("ecb.up") && name.contains(".proj.") {
        // each transposed-conv output sees one tap per input channel
        shape[0]
    } else {
        shape[1..].iter().product()
    }
}

impl TriBranchNet {
    pub fn init(seed: u64, classes: usize, widths: [usize; 3]) -> Result<Self> {
        if classes < 2 {
            return Err(EtcError::Config(format!(
                "classes must be >= 2, got {classes}"
            )));
        }
        if widths.contains(&0) {
            return Err(EtcError::Config(format!(
                "widths must be positive, got {widths:?}"
            )));
        }
        let mut enc_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dec_rngs: Vec<ChaCha8Rng> = (0..3)
            .map(|b| {
                let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(b as u64));
                r.set_stream(1);
                r
            })
            .collect();
        let params = layout(classes, widths)
            .into_iter()
            .map(|(name, shape)| {
                let numel: usize = shape.iter().product();
                let data = if name.ends_with(".bias") {
                    let v = if name.contains(".head.") {
                        HEAD_BIAS_INIT
                    } else {
                        0.0
                    };
                    vec![v; numel]
                } else {
                    let mut std = (2.0 / fan_in(&name, &shape) as f64).sqrt();
                    if name.contains(".head.") {
                        std *= HEAD_WEIGHT_SCALE;
                    }
                    let rng = match BRANCHES.iter().position(|b| name.starts_with(b)) {
                        Some(b) => &mut dec_rngs[b],
                        None => &mut enc_rng,
                    };
                    (0..numel)
                        .map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng))
                        .collect::<Vec<f64>>()
                };
                Ok(Param {
                    name,
                    value: Tensor::new(&shape, data)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            classes,
            widths,
            params,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn widths(&self) -> [usize; 3] {
        self.widths
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// FNV-1a over every parameter checksum, in order.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for byte in p.value.checksum().to_le_bytes() {
                h ^= byte as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }

    /// Registers every parameter as a differentiable leaf.
    pub fn param_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.leaf(p.value.clone().with_grad()))
            .collect()
    }

    /// Registers every parameter as a constant.
    pub fn const_vars(&self, g: &mut Graph) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| g.constant(p.value.clone()))
            .collect()
    }

    /// Forward pass with the parameters supplied as graph variables (in
    /// [`TriBranchNet::params`] order). `iteration` only labels errors.
    pub fn forward_with(
        &self,
        g: &mut Graph,
        x: Var,
        params: &[Var],
        iteration: u64,
    ) -> Result<BranchVars> {
        if params.len() != self.params.len() {
            return Err(EtcError::Usage(format!(
                "expected {} parameter vars, got {}",
                self.params.len(),
                params.len()
            )));
        }
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 1 {
            return Err(EtcError::Dimension(format!(
                "input must be (B,1,H,W), got {shape:?}"
            )));
        }
        if !shape[2].is_multiple_of(4) || !shape[3].is_multiple_of(4) {
            return Err(EtcError::Dimension(format!(
                "spatial dims {}x{} are not divisible by 4",
                shape[2], shape[3]
            )));
        }
        let mut cursor = Cursor { params, next: 0 };

        let mut skips = Vec::with_capacity(2);
        let mut h = x;
        for s in 0..3 {
            if s > 0 {
                h = g.maxpool2d(h, 2)?;
            }
            h = conv_relu(g, h, &mut cursor, 1)?;
            h = conv_relu(g, h, &mut cursor, 1)?;
            if s < 2 {
                skips.push(h);
            }
        }
        let bottom = h;

        let mut evidence = [bottom; 3];
        for (b, slot) in evidence.iter_mut().enumerate() {
            let mut h = bottom;
            for l in 0..2 {
                let (w, bias) = cursor.pair();
                h = match Upsample::for_branch(b) {
                    Upsample::Transposed => g.conv_transpose2d(h, w, Some(bias), 2)?,
                    Upsample::Bilinear => {
                        let u = g.upsample_bilinear(h, 2)?;
                        g.conv2d(u, w, Some(bias), 1, 1)?
                    }
                    Upsample::Nearest => {
                        let u = g.upsample_nearest(h, 2)?;
                        g.conv2d(u, w, Some(bias), 1, 1)?
                    }
                };
                h = g.relu(h)?;
                h = g.concat(&[h, skips[1 - l]], 1)?;
                h = conv_relu(g, h, &mut cursor, 1)?;
                h = conv_relu(g, h, &mut cursor, 1)?;
            }
            let (w, bias) = cursor.pair();
            let logits = g.conv2d(h, w, Some(bias), 1, 0)?;
            let e = g.softplus(logits)?;
            if !g.value(e).is_finite() {
                return Err(EtcError::Numeric {
                    iteration,
                    message: format!("non-finite evidence in branch {}", BRANCHES[b]),
                });
            }
            *slot = e;
        }
        Ok(BranchVars { evidence })
    }

    /// Differentiable forward pass; returns the outputs and the parameter
    /// leaves whose gradients drive the update.
    pub fn forward(&self, g: &mut Graph, x: Var, iteration: u64) -> Result<(BranchVars, Vec<Var>)> {
        let params = self.param_vars(g);
        let out = self.forward_with(g, x, &params, iteration)?;
        Ok((out, params))
    }

    /// Gradient-free forward pass on a `(B,1,H,W)` batch.
    pub fn infer(&self, x: &Tensor) -> Result<[Tensor; 3]> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let params = self.const_vars(&mut g);
        let out = self.forward_with(&mut g, xv, &params, 0)?;
        Ok(out.evidence.map(|v| g.value(v).clone()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        writeln!(
            buf,
            "{WEIGHTS_HEADER} {WEIGHTS_VERSION} {}",
            self.params.len()
        )
        .expect("vec write");
        for p in &self.params {
            let dims: Vec<String> = p.value.shape().iter().map(|d| d.to_string()).collect();
            writeln!(buf, "{} {}", p.name, dims.join(" ")).expect("vec write");
        }
        for p in &self.params {
            p.value.write_etns(&mut buf).expect("vec write");
        }
        fs::write(path, buf).map_err(|e| EtcError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| EtcError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    pub fn read_from<R: BufRead>(r: &mut R) -> Result<Self> {
        let mut line = String::new();
        let mut next_line = |r: &mut R| -> Result<String> {
            line.clear();
            let n = r
                .read_line(&mut line)
                .map_err(|e| EtcError::Format(format!("weights manifest unreadable: {e}")))?;
            if n == 0 {
                return Err(EtcError::Format("weights manifest truncated".into()));
            }
            Ok(line.trim_end().to_string())
        };
        let header = next_line(r)?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let count = match fields.as_slice() {
            [tag, ver, count] if *tag == WEIGHTS_HEADER => {
                if ver.parse::<u32>().ok() != Some(WEIGHTS_VERSION) {
                    return Err(EtcError::Format(format!(
                        "unsupported weights version {ver}"
                    )));
                }
                count
                    .parse::<usize>()
                    .map_err(|_| EtcError::Format(format!("bad parameter count {count:?}")))?
            }
            _ => return Err(EtcError::Format("missing weights header".into())),
        };
        let mut manifest = Vec::with_capacity(count);
        for _ in 0..count {
            let l = next_line(r)?;
            let mut parts = l.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| EtcError::Format("empty manifest line".into()))?
                .to_string();
            let dims = parts
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| EtcError::Format(format!("bad dims for parameter {name}")))?;
            manifest.push((name, dims));
        }
        let (classes, widths) = infer_architecture(&manifest)?;
        let expected = layout(classes, widths);
        for ((name, dims), (want_name, want_dims)) in manifest.iter().zip(&expected) {
            if !expected.iter().any(|(n, _)| n == name) {
                return Err(EtcError::Format(format!("unknown parameter name {name}")));
            }
            if name != want_name {
                return Err(EtcError::Format(format!(
                    "parameter {name} out of order (expected {want_name})"
                )));
            }
            if dims != want_dims {
                return Err(EtcError::Format(format!(
                    "parameter {name} has shape {dims:?}, architecture needs {want_dims:?}"
                )));
            }
        }
        if manifest.len() != expected.len() {
            return Err(EtcError::Format(format!(
                "manifest lists {} parameters, architecture needs {}",
                manifest.len(),
                expected.len()
            )));
        }
        let mut params = Vec::with_capacity(count);
        for (name, dims) in manifest {
            let value = Tensor::read_etns(r)?
                .ok_or_else(|| EtcError::Format(format!("weights truncated before {name}")))?;
            if value.shape() != dims.as_slice() {
                return Err(EtcError::Format(format!(
                    "tensor for {name} has shape {:?}, manifest says {dims:?}",
                    value.shape()
                )));
            }
            params.push(Param { name, value });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)
            .map_err(|e| EtcError::Format(e.to_string()))?
            != 0
        {
            return Err(EtcError::Format("trailing bytes after weights".into()));
        }
        Ok(Self {
            classes,
            widths,
            params,
        })
    }
}

fn infer_architecture(manifest: &[(String, Vec<usize>)]) -> Result<(usize, [usize; 3])> {
    let dim0 = |name: &str| -> Result<usize> {
        manifest
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, d)| d.first().copied())
            .ok_or_else(|| EtcError::Format(format!("weights lack parameter {name}")))
    };
    let widths = [
        dim0("enc0.conv0.weight")?,
        dim0("enc1.conv0.weight")?,
        dim0("enc2.conv0.weight")?,
    ];
    let classes = dim0("ecb.head.weight")?;
    if classes < 2 || widths.contains(&0) {
        return Err(EtcError::Format(
            "degenerate architecture in manifest".into(),
        ));
    }
    Ok((classes, widths))
}

struct Cursor<'a> {
    params: &'a [Var],
    next: usize,
}

impl Cursor<'_> {
    fn pair(&mut self) -> (Var, Var) {
        let out = (self.params[self.next], self.params[self.next + 1]);
        self.next += 2;
        out
    }
}

fn conv_relu(g: &mut Graph, x: Var, cursor: &mut Cursor<'_>, padding: usize) -> Result<Var> {
    let (w, b) = cursor.pair();
    let y = g.conv2d(x, w, Some(b), 1, padding)?;
    g.relu(y)
}
