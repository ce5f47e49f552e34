use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum VarKind {
    Linear { min: f64, max: f64 },
    /// Normalized in the log10 domain.
    Exponential { min: f64, max: f64 },
    Categorical { choices: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VariableRepr", into = "VariableRepr")]
pub struct Variable {
    pub name: String,
    pub kind: VarKind,
    /// Round to the nearest integer (ties up) when the value is consumed.
    pub integer: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum KindTag {
    Linear,
    Exponential,
    Categorical,
}

/// Flat config form: `{name, kind, min, max}` or `{name, kind, choices}`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VariableRepr {
    name: String,
    kind: KindTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    choices: Option<Vec<String>>,
    #[serde(default)]
    integer: bool,
}

impl TryFrom<VariableRepr> for Variable {
    type Error = String;

    fn try_from(r: VariableRepr) -> std::result::Result<Self, String> {
        let kind = match (r.kind, r.min, r.max, r.choices) {
            (KindTag::Linear, Some(min), Some(max), None) => VarKind::Linear { min, max },
            (KindTag::Exponential, Some(min), Some(max), None) => VarKind::Exponential { min, max },
            (KindTag::Categorical, None, None, Some(choices)) => VarKind::Categorical { choices },
            (KindTag::Categorical, ..) => return Err(format!("variable `{}`: categorical takes only `choices`", r.name)),
            _ => return Err(format!("variable `{}`: numeric kinds take `min` and `max` only", r.name)),
        };
        Ok(Variable {
            name: r.name,
            kind,
            integer: r.integer,
        })
    }
}

impl From<Variable> for VariableRepr {
    fn from(v: Variable) -> Self {
        let (kind, min, max, choices) = match v.kind {
            VarKind::Linear { min, max } => (KindTag::Linear, Some(min), Some(max), None),
            VarKind::Exponential { min, max } => (KindTag::Exponential, Some(min), Some(max), None),
            VarKind::Categorical { choices } => (KindTag::Categorical, None, None, Some(choices)),
        };
        VariableRepr {
            name: v.name,
            kind,
            min,
            max,
            choices,
            integer: v.integer,
        }
    }
}

impl Variable {
    pub fn linear(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Linear { min, max },
            integer: false,
        }
    }

    pub fn exponential(name: &str, min: f64, max: f64) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Exponential { min, max },
            integer: false,
        }
    }

    pub fn categorical(name: &str, choices: &[&str]) -> Self {
        Self {
            name: name.into(),
            kind: VarKind::Categorical {
                choices: choices.iter().map(|c| c.to_string()).collect(),
            },
            integer: false,
        }
    }

    pub fn rounded(mut self) -> Self {
        self.integer = true;
        self
    }

    pub fn is_categorical(&self) -> bool {
        matches!(self.kind, VarKind::Categorical { .. })
    }

    fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::config(format!("variable `{}`: {msg}", self.name)));
        match &self.kind {
            VarKind::Linear { min, max } | VarKind::Exponential { min, max } => {
                if !(min.is_finite() && max.is_finite() && min < max) {
                    return bad(format!("need min < max, got [{min}, {max}]"));
                }
                if matches!(self.kind, VarKind::Exponential { .. }) && *min <= 0.0 {
                    return bad(format!("exponential range needs min > 0, got {min}"));
                }
            }
            VarKind::Categorical { choices } => {
                if choices.len() < 2 {
                    return bad("needs at least two choices".into());
                }
                if self.integer {
                    return bad("categorical variables cannot be rounded".into());
                }
            }
        }
        Ok(())
    }

    pub fn normalize(&self, v: &Value) -> Result<f64> {
        let oob = |x: &dyn std::fmt::Debug| Error::Search(format!("value {x:?} outside variable `{}`", self.name));
        match (&self.kind, v) {
            (VarKind::Linear { min, max }, Value::Number(x)) => {
                if !(x >= min && x <= max) {
                    return Err(oob(x));
                }
                Ok((x - min) / (max - min))
            }
            (VarKind::Exponential { min, max }, Value::Number(x)) => {
                if !(x >= min && x <= max) {
                    return Err(oob(x));
                }
                let (lo, hi) = (min.log10(), max.log10());
                Ok((x.log10() - lo) / (hi - lo))
            }
            (VarKind::Categorical { choices }, Value::Category(c)) => {
                choices.iter().position(|x| x == c).map(|i| i as f64).ok_or_else(|| oob(c))
            }
            _ => Err(Error::Search(format!("value {v:?} has the wrong kind for `{}`", self.name))),
        }
    }

    pub fn denormalize(&self, u: f64) -> Result<Value> {
        match &self.kind {
            VarKind::Linear { min, max } => {
                check_unit(&self.name, u)?;
                Ok(Value::Number((min + u * (max - min)).clamp(*min, *max)))
            }
            VarKind::Exponential { min, max } => {
                check_unit(&self.name, u)?;
                let (lo, hi) = (min.log10(), max.log10());
                Ok(Value::Number(10f64.powf(lo + u * (hi - lo)).clamp(*min, *max)))
            }
            VarKind::Categorical { choices } => {
                let i = u as usize;
                if u < 0.0 || u.fract() != 0.0 || i >= choices.len() {
                    return Err(Error::Search(format!("bad category index {u} for `{}`", self.name)));
                }
                Ok(Value::Category(choices[i].clone()))
            }
        }
    }

    pub fn n_categories(&self) -> Option<usize> {
        match &self.kind {
            VarKind::Categorical { choices } => Some(choices.len()),
            _ => None,
        }
    }
}

fn check_unit(name: &str, u: f64) -> Result<()> {
    if (0.0..=1.0).contains(&u) {
        Ok(())
    } else {
        Err(Error::Search(format!("normalized value {u} for `{name}` outside [0, 1]")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Value {
    Number(f64),
    Category(String),
}

impl Value {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Number(x) => Some(*x),
            Value::Category(_) => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SearchSpace {
    pub variables: Vec<Variable>,
}

impl SearchSpace {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let s = Self { variables };
        s.validate()?;
        Ok(s)
    }

    /// Task weights on log scales, optionally with per-task update periods.
    pub fn task_weights(with_periods: bool) -> Self {
        let mut v = vec![
            Variable::exponential("w_seg", 0.1, 1000.0),
            Variable::exponential("w_det", 0.1, 100.0),
        ];
        if with_periods {
            v.push(Variable::linear("nu_seg", 1.0, 10.0).rounded());
            v.push(Variable::linear("nu_det", 1.0, 10.0).rounded());
        }
        Self { variables: v }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variables.is_empty() {
            return Err(Error::config("search space has no variables"));
        }
        let mut names = std::collections::BTreeSet::new();
        for v in &self.variables {
            v.validate()?;
            if !names.insert(&v.name) {
                return Err(Error::config(format!("duplicate variable `{}`", v.name)));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.variables.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.variables.iter().position(|v| v.name == name)
    }

    pub fn normalize(&self, values: &[Value]) -> Result<Vec<f64>> {
        self.check_len(values.len())?;
        self.variables.iter().zip(values).map(|(var, v)| var.normalize(v)).collect()
    }

    pub fn denormalize(&self, point: &[f64]) -> Result<Vec<Value>> {
        self.check_len(point.len())?;
        self.variables.iter().zip(point).map(|(var, u)| var.denormalize(*u)).collect()
    }

    fn check_len(&self, n: usize) -> Result<()> {
        if n != self.dim() {
            return Err(Error::Search(format!("expected {} values, got {n}", self.dim())));
        }
        Ok(())
    }

    /// Max over variables of the normalized difference; categorical mismatches count 1.
    pub fn tabu_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        self.variables
            .iter()
            .zip(a.iter().zip(b))
            .map(|(v, (x, y))| {
                if v.is_categorical() {
                    if x == y {
                        0.0
                    } else {
                        1.0
                    }
                } else {
                    (x - y).abs()
                }
            })
            .fold(0.0, f64::max)
    }
}
