use cfgcd_autodiff::{Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{NetError, Result};

/// Multiplier applied to a freshly initialized w-branch so that a student
/// starts out behaving like the network it was copied from.
pub const W_BRANCH_INIT_SCALE: f64 = 1e-3;

/// A class label or the null token used for unconditional predictions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Condition {
    Class(usize),
    Null,
}

impl Condition {
    fn row(self, classes: usize) -> Result<usize> {
        match self {
            Condition::Class(c) if c < classes => Ok(c),
            Condition::Class(c) => Err(NetError::ConditionOutOfRange { id: c, classes }),
            Condition::Null => Ok(classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    /// Latent dimension `d`.
    pub dim: usize,
    /// Number of condition classes; the table holds one extra null row.
    pub classes: usize,
    pub hidden: Vec<usize>,
    /// Frequencies in each Fourier embedding (`2k` features).
    pub fourier_k: usize,
    /// Whether the network takes a guidance strength input.
    pub w_branch: bool,
    /// `w` is divided by this before its Fourier embedding.
    ///
    /// The features have period 2 in their argument, so the supported range
    /// of `w` has to be squeezed into `[0, 1)` to keep distinct strengths
    /// distinguishable.
    pub w_scale: f64,
}

impl NetConfig {
    pub fn new(dim: usize, classes: usize, hidden: Vec<usize>) -> Self {
        NetConfig { dim, classes, hidden, fourier_k: 6, w_branch: false, w_scale: 6.0 }
    }

    pub fn with_w_branch(mut self, on: bool) -> Self {
        self.w_branch = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.classes == 0 || self.fourier_k == 0 {
            return Err(NetError::InvalidConfig("dim, classes and fourier_k must be positive".into()));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return Err(NetError::InvalidConfig("hidden widths must be a non-empty list of positive integers".into()));
        }
        if !(self.w_scale > 0.0) {
            return Err(NetError::InvalidConfig("w_scale must be positive".into()));
        }
        Ok(())
    }

    /// Names and shapes of every parameter, in storage order.
    pub fn layout(&self) -> Vec<(String, [usize; 2])> {
        let h0 = self.hidden[0];
        let f = 2 * self.fourier_k;
        let mut out = vec![
            ("in.weight".to_string(), [self.dim, h0]),
            ("in.bias".to_string(), [1, h0]),
            ("time.weight".to_string(), [f, h0]),
            ("cond.table".to_string(), [self.classes + 1, h0]),
        ];
        if self.w_branch {
            out.push(("w.weight".to_string(), [f, h0]));
            out.push(("w.bias".to_string(), [1, h0]));
        }
        for (i, pair) in self.hidden.windows(2).enumerate() {
            out.push((format!("hidden.{i}.weight"), [pair[0], pair[1]]));
            out.push((format!("hidden.{i}.bias"), [1, pair[1]]));
        }
        let hl = *self.hidden.last().expect("validated");
        out.push(("out.weight".to_string(), [hl, self.dim]));
        out.push(("out.bias".to_string(), [1, self.dim]));
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.layout().iter().map(|(_, s)| s[0] * s[1]).sum()
    }
}

/// Conditional MLP: latent, Fourier time features, a condition row and an
/// optional Fourier guidance-strength embedding are summed into the first
/// hidden layer, followed by SiLU layers and a linear read-out of width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserNet {
    config: NetConfig,
    names: Vec<String>,
    params: Vec<Tensor>,
}

fn uniform_init<R: Rng + ?Sized>(rng: &mut R, shape: [usize; 2], fan_in: usize) -> Tensor {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let data = (0..shape[0] * shape[1]).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape[0], shape[1], data).expect("positive shape")
}

fn init_params<R: Rng + ?Sized>(rng: &mut R, layout: &[(String, [usize; 2])]) -> Vec<Tensor> {
    let mut fan_in = 1;
    let mut out = Vec::with_capacity(layout.len());
    for (name, shape) in layout {
        let t = if name == "cond.table" {
            let data = (0..shape[0] * shape[1]).map(|_| 0.5 * rng.sample::<f64, _>(StandardNormal)).collect();
            Tensor::new(shape[0], shape[1], data).expect("positive shape")
        } else {
            // A bias shares the fan-in of the weight listed just before it.
            if name.ends_with(".weight") {
                fan_in = shape[0];
            }
            let mut t = uniform_init(rng, *shape, fan_in);
            if name.starts_with("w.") {
                for x in t.data_mut() {
                    *x *= W_BRANCH_INIT_SCALE;
                }
            }
            t
        };
        out.push(t);
    }
    out
}

impl DenoiserNet {
    /// Freshly initialized network. A w-branch starts scaled by
    /// [`W_BRANCH_INIT_SCALE`].
    pub fn new<R: Rng + ?Sized>(config: NetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        let params = init_params(rng, &layout);
        let names = layout.into_iter().map(|(n, _)| n).collect();
        Ok(DenoiserNet { config, names, params })
    }

    /// Rebuilds a network from named tensors, checking every name and shape.
    pub fn from_params(config: NetConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let layout = config.layout();
        if named.len() != layout.len() {
            return Err(NetError::Incompatible(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                named.len()
            )));
        }
        let mut params = Vec::with_capacity(layout.len());
        for ((name, shape), (got_name, t)) in layout.iter().zip(named) {
            if *name != got_name {
                return Err(NetError::Incompatible(format!("expected parameter `{name}`, found `{got_name}`")));
            }
            if t.shape() != *shape {
                return Err(NetError::ShapeDrift { name: got_name, got: t.shape(), expected: *shape });
            }
            params.push(t);
        }
        let names = layout.into_iter().map(|(n, _)| n).collect();
        Ok(DenoiserNet { config, names, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn has_w_branch(&self) -> bool {
        self.config.w_branch
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = self.names.iter().position(|n| n == name)?;
        Some(&mut self.params[i])
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Replaces all parameters, rejecting any change of shape.
    pub fn set_params(&mut self, params: Vec<Tensor>) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(NetError::Incompatible(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            if p.shape() != self.params[i].shape() {
                return Err(NetError::ShapeDrift {
                    name: self.names[i].clone(),
                    got: p.shape(),
                    expected: self.params[i].shape(),
                });
            }
        }
        self.params = params;
        Ok(())
    }

    /// Places every parameter on `tape`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), trainable)).collect()
    }

    fn check_inputs(
        &self,
        rows: usize,
        cols: usize,
        t: &[f64],
        cond: &[Condition],
        w: Option<&[f64]>,
    ) -> Result<Vec<usize>> {
        if cols != self.config.dim {
            return Err(NetError::DimMismatch { got: cols, expected: self.config.dim });
        }
        if t.len() != rows {
            return Err(NetError::BatchMismatch { what: "t", got: t.len(), expected: rows });
        }
        if cond.len() != rows {
            return Err(NetError::BatchMismatch { what: "cond", got: cond.len(), expected: rows });
        }
        match (self.config.w_branch, w) {
            (false, Some(_)) => return Err(NetError::UnexpectedW),
            (true, None) => return Err(NetError::MissingW),
            (true, Some(w)) if w.len() != rows => {
                return Err(NetError::BatchMismatch { what: "w", got: w.len(), expected: rows })
            }
            _ => {}
        }
        cond.iter().map(|c| c.row(self.config.classes)).collect()
    }

    /// Records the forward pass on `tape` using parameters previously placed
    /// there by [`bind`](Self::bind).
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        params: &[Var],
        z: Var,
        t: &[f64],
        cond: &[Condition],
        w: Option<&[f64]>,
    ) -> Result<Var> {
        let [rows, cols] = tape.value(z).shape();
        let rows_idx = self.check_inputs(rows, cols, t, cond, w)?;
        if params.len() != self.params.len() {
            return Err(NetError::Incompatible("parameter binding has the wrong length".into()));
        }
        let k = self.config.fourier_k;
        let mut p = params.iter().copied();
        let mut next = || p.next().expect("layout length checked");

        let (w_in, b_in, w_time, table) = (next(), next(), next(), next());
        let mut h = tape.matmul(z, w_in)?;
        h = tape.add(h, b_in)?;
        let tcol = tape.constant(Tensor::column(t));
        let tf = tape.fourier_features(tcol, k)?;
        let te = tape.matmul(tf, w_time)?;
        h = tape.add(h, te)?;
        let ce = tape.gather_rows(table, &rows_idx)?;
        h = tape.add(h, ce)?;
        if let Some(w) = w {
            let (w_w, w_b) = (next(), next());
            let scaled: Vec<f64> = w.iter().map(|x| x / self.config.w_scale).collect();
            let wcol = tape.constant(Tensor::column(&scaled));
            let wf = tape.fourier_features(wcol, k)?;
            let we = tape.matmul(wf, w_w)?;
            let we = tape.add(we, w_b)?;
            h = tape.add(h, we)?;
        }
        h = tape.silu(h)?;
        for _ in 1..self.config.hidden.len() {
            let (wt, b) = (next(), next());
            h = tape.matmul(h, wt)?;
            h = tape.add(h, b)?;
            h = tape.silu(h)?;
        }
        let (w_out, b_out) = (next(), next());
        let out = tape.matmul(h, w_out)?;
        Ok(tape.add(out, b_out)?)
    }

    /// Gradient-free evaluation.
    pub fn forward(&self, z: &Tensor, t: &[f64], cond: &[Condition], w: Option<&[f64]>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let out = self.forward_on(&mut tape, &params, zv, t, cond, w)?;
        Ok(tape.value(out).clone())
    }
}

/// Where a student's weights come from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// Copy of the plain diffusion teacher.
    Unguided,
    /// Copy of a diffusion model already trained to follow guided outputs.
    Guided,
}

/// Builds a student with `student_config` whose parameters are copied from
/// the teacher (`Unguided`) or from `guided_source` (`Guided`).
///
/// Every parameter present in both networks is copied exactly. A w-branch
/// that the source lacks keeps its fresh initialization, which is already
/// scaled by [`W_BRANCH_INIT_SCALE`].
pub fn init_student_from_teacher<R: Rng + ?Sized>(
    student_config: &NetConfig,
    teacher: &DenoiserNet,
    mode: InitMode,
    guided_source: Option<&DenoiserNet>,
    rng: &mut R,
) -> Result<DenoiserNet> {
    let source = match (mode, guided_source) {
        (InitMode::Unguided, _) => teacher,
        (InitMode::Guided, Some(g)) => g,
        (InitMode::Guided, None) => {
            return Err(NetError::Incompatible("guided initialization needs a w-conditioned source network".into()))
        }
    };
    let sc = source.config();
    if sc.dim != student_config.dim
        || sc.classes != student_config.classes
        || sc.hidden != student_config.hidden
        || sc.fourier_k != student_config.fourier_k
    {
        return Err(NetError::Incompatible(format!(
            "source widths (d={}, K={}, hidden={:?}, k={}) differ from student (d={}, K={}, hidden={:?}, k={})",
            sc.dim,
            sc.classes,
            sc.hidden,
            sc.fourier_k,
            student_config.dim,
            student_config.classes,
            student_config.hidden,
            student_config.fourier_k
        )));
    }
    let mut student = DenoiserNet::new(student_config.clone(), rng)?;
    for i in 0..student.names.len() {
        if let Some(src) = source.param(&student.names[i]) {
            student.params[i] = src.clone();
        }
    }
    Ok(student)
}
