//! Task identifiers and per-task containers shared by every module.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Seg,
    Det,
}

impl Task {
    pub const ALL: [Task; 2] = [Task::Seg, Task::Det];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Seg => "seg",
            Task::Det => "det",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "seg" => Ok(Task::Seg),
            "det" => Ok(Task::Det),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

/// One value per task.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PerTask<T> {
    pub seg: T,
    pub det: T,
}

impl<T> PerTask<T> {
    pub fn new(seg: T, det: T) -> Self {
        Self { seg, det }
    }

    pub fn splat(v: T) -> Self
    where
        T: Clone,
    {
        Self {
            seg: v.clone(),
            det: v,
        }
    }

    pub fn get(&self, task: Task) -> &T {
        match task {
            Task::Seg => &self.seg,
            Task::Det => &self.det,
        }
    }

    pub fn get_mut(&mut self, task: Task) -> &mut T {
        match task {
            Task::Seg => &mut self.seg,
            Task::Det => &mut self.det,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(Task, &T) -> U) -> PerTask<U> {
        PerTask {
            seg: f(Task::Seg, &self.seg),
            det: f(Task::Det, &self.det),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (Task, &T)> {
        [(Task::Seg, &self.seg), (Task::Det, &self.det)].into_iter()
    }
}

impl PerTask<f64> {
    pub fn sum(&self) -> f64 {
        self.seg + self.det
    }

    pub fn is_finite(&self) -> bool {
        self.seg.is_finite() && self.det.is_finite()
    }
}
