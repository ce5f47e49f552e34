//! Shared-trunk network with one head per task.
//!
//! The trunk is a stack of 3x3 convolutions with ReLU over a single-channel
//! grid. The segmentation head is a per-cell classifier, the detection head a
//! hidden convolution followed by a per-cell box/objectness/class readout.

mod snapshot;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use snapshot::{ModelSnapshot, RngState, SNAPSHOT_VERSION};

use crate::error::{Error, Result};
use crate::grad::{AdamState, Graph, ParamSet, Partition, Tensor, Var};
use crate::task::{PerTask, Task};
use crate::tasks::{BenchmarkConfig, Scene, DET_FIXED_CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub grid: usize,
    pub trunk_channels: Vec<usize>,
    pub kernel: usize,
    pub det_hidden: usize,
    pub seg_classes: usize,
    pub det_classes: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            grid: 16,
            trunk_channels: vec![8, 16],
            kernel: 3,
            det_hidden: 8,
            seg_classes: 4,
            det_classes: 2,
        }
    }
}

impl ArchConfig {
    pub fn for_benchmark(cfg: &BenchmarkConfig) -> Self {
        Self {
            grid: cfg.grid,
            seg_classes: cfg.seg_classes(),
            det_classes: cfg.shape_classes,
            ..Self::default()
        }
    }

    pub fn det_channels(&self) -> usize {
        DET_FIXED_CHANNELS + self.det_classes
    }

    pub fn validate(&self) -> Result<()> {
        let mut v = Vec::new();
        if self.grid == 0 {
            v.push("grid must be positive".to_string());
        }
        if self.trunk_channels.is_empty() || self.trunk_channels.len() > 4 {
            v.push(format!("trunk needs 1..=4 layers, got {}", self.trunk_channels.len()));
        }
        if self.trunk_channels.contains(&0) {
            v.push("trunk widths must be positive".into());
        }
        if self.kernel % 2 == 0 {
            v.push(format!("kernel must be odd, got {}", self.kernel));
        }
        if self.det_hidden == 0 {
            v.push("det_hidden must be positive".into());
        }
        if self.seg_classes < 2 {
            v.push("seg_classes must be >= 2".into());
        }
        if self.det_classes == 0 {
            v.push("det_classes must be positive".into());
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }

    /// Checks the architecture against the benchmark it will be trained on.
    pub fn validate_for(&self, bench: &BenchmarkConfig) -> Result<()> {
        self.validate()?;
        let mut v = Vec::new();
        if self.grid != bench.grid {
            v.push(format!("arch grid {} != benchmark grid {}", self.grid, bench.grid));
        }
        if self.seg_classes != bench.seg_classes() {
            v.push(format!("seg_classes {} != benchmark {}", self.seg_classes, bench.seg_classes()));
        }
        if self.det_classes != bench.shape_classes {
            v.push(format!("det_classes {} != benchmark {}", self.det_classes, bench.shape_classes));
        }
        if v.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(v))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub partition: Partition,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub relu: bool,
}

impl LayerSpec {
    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }
}

fn layer_specs(arch: &ArchConfig) -> (Vec<LayerSpec>, PerTask<Vec<LayerSpec>>) {
    let mut trunk = Vec::new();
    let mut in_ch = 1;
    for (i, &w) in arch.trunk_channels.iter().enumerate() {
        trunk.push(LayerSpec {
            name: format!("trunk.{i}"),
            partition: Partition::Shared,
            in_ch,
            out_ch: w,
            kernel: arch.kernel,
            relu: true,
        });
        in_ch = w;
    }
    let seg = vec![LayerSpec {
        name: "seg.out".into(),
        partition: Partition::Task(Task::Seg),
        in_ch,
        out_ch: arch.seg_classes,
        kernel: arch.kernel,
        relu: false,
    }];
    let det = vec![
        LayerSpec {
            name: "det.hidden".into(),
            partition: Partition::Task(Task::Det),
            in_ch,
            out_ch: arch.det_hidden,
            kernel: arch.kernel,
            relu: true,
        },
        LayerSpec {
            name: "det.out".into(),
            partition: Partition::Task(Task::Det),
            in_ch: arch.det_hidden,
            out_ch: arch.det_channels(),
            kernel: 1,
            relu: false,
        },
    ];
    (trunk, PerTask::new(seg, det))
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Outputs {
    pub features: Var,
    /// Weight of the last shared layer, where gradient norms are measured.
    pub last_shared_weight: Var,
    pub seg: Option<Var>,
    pub det: Option<Var>,
}

impl Outputs {
    pub fn get(&self, task: Task) -> Option<Var> {
        match task {
            Task::Seg => self.seg,
            Task::Det => self.det,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MtlModel {
    arch: ArchConfig,
    trunk: Vec<LayerSpec>,
    heads: PerTask<Vec<LayerSpec>>,
    pub params: ParamSet,
    pub adam: AdamState,
    pub rng: ChaCha8Rng,
    pub epoch: u64,
    seed: u64,
}

impl MtlModel {
    pub fn build(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let (trunk, heads) = layer_specs(&arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        for spec in trunk.iter().chain(&heads.seg).chain(&heads.det) {
            let fan_in = spec.in_ch * spec.kernel * spec.kernel;
            // He scaling for ReLU layers, plain fan-in scaling for readouts.
            let gain = if spec.relu { 2.0 } else { 1.0 };
            let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
            let n = spec.out_ch * fan_in;
            let w: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
            params.insert(
                spec.weight(),
                spec.partition,
                Tensor::new(vec![spec.out_ch, spec.in_ch, spec.kernel, spec.kernel], w)?,
            )?;
            params.insert(spec.bias(), spec.partition, Tensor::zeros(&[spec.out_ch]))?;
        }
        Ok(Self {
            arch,
            trunk,
            heads,
            params,
            adam: AdamState::default(),
            rng,
            epoch: 0,
            seed,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Digest of the ordered layer specs.
    pub fn arch_hash(&self) -> u64 {
        let mut h = Sha256::new();
        for spec in self.trunk.iter().chain(&self.heads.seg).chain(&self.heads.det) {
            h.update(format!(
                "{}|{}|{}|{}|{}|{};",
                spec.name, spec.partition, spec.in_ch, spec.out_ch, spec.kernel, spec.relu
            ));
        }
        let d = h.finalize();
        u64::from_le_bytes(d[..8].try_into().expect("digest has 32 bytes"))
    }

    pub fn last_shared_weight_name(&self) -> String {
        self.trunk.last().expect("validated non-empty trunk").weight()
    }

    /// Batch input tensor `[n, 1, grid, grid]`.
    pub fn input_tensor(&self, scenes: &[&Scene]) -> Result<Tensor> {
        let g = self.arch.grid;
        if let Some(s) = scenes.iter().find(|s| s.grid != g || s.pixels.len() != g * g) {
            return Err(Error::Shape {
                op: "forward_mtl",
                lhs: vec![g, g],
                rhs: vec![s.grid, s.pixels.len()],
            });
        }
        let data = scenes.iter().flat_map(|s| s.pixels.iter().copied()).collect();
        Tensor::new(vec![scenes.len(), 1, g, g], data)
    }

    fn conv(&self, graph: &mut Graph, x: Var, spec: &LayerSpec) -> Result<(Var, Var)> {
        let w = graph.param(&self.params, &spec.weight())?;
        let b = graph.param(&self.params, &spec.bias())?;
        let y = graph.conv2d(x, w, b)?;
        let y = if spec.relu { graph.relu(y)? } else { y };
        Ok((y, w))
    }

    /// Runs the trunk and the requested heads. Each head output is `[n, channels, grid, grid]`.
    pub fn forward(&self, graph: &mut Graph, input: Tensor, heads: &[Task]) -> Result<Outputs> {
        let s = input.shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.arch.grid || s[3] != self.arch.grid {
            return Err(Error::Shape {
                op: "forward_mtl",
                lhs: vec![0, 1, self.arch.grid, self.arch.grid],
                rhs: s.to_vec(),
            });
        }
        let mut x = graph.constant(input);
        let mut last_w = None;
        for spec in &self.trunk {
            let (y, w) = self.conv(graph, x, spec)?;
            x = y;
            last_w = Some(w);
        }
        let features = x;
        let mut out = Outputs {
            features,
            last_shared_weight: last_w.expect("non-empty trunk"),
            seg: None,
            det: None,
        };
        for &task in heads {
            let mut h = features;
            for spec in self.heads.get(task) {
                h = self.conv(graph, h, spec)?.0;
            }
            match task {
                Task::Seg => out.seg = Some(h),
                Task::Det => out.det = Some(h),
            }
        }
        Ok(out)
    }

    pub fn forward_scenes(&self, graph: &mut Graph, scenes: &[&Scene], heads: &[Task]) -> Result<Outputs> {
        let input = self.input_tensor(scenes)?;
        self.forward(graph, input, heads)
    }

    pub fn snapshot(&self) -> ModelSnapshot {
        ModelSnapshot {
            version: SNAPSHOT_VERSION,
            arch_hash: self.arch_hash(),
            epoch: self.epoch,
            seed: self.seed,
            rng: RngState::capture(&self.rng),
            params: self.params.clone(),
            adam: self.adam.clone(),
        }
    }

    pub fn restore(&mut self, snap: &ModelSnapshot) -> Result<()> {
        if snap.version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!("unsupported version {}", snap.version)));
        }
        if snap.arch_hash != self.arch_hash() {
            return Err(Error::Snapshot(format!(
                "architecture hash {:016x} does not match model {:016x}",
                snap.arch_hash,
                self.arch_hash()
            )));
        }
        for entry in self.params.iter() {
            let other = snap
                .params
                .get(&entry.name)
                .map_err(|_| Error::Snapshot(format!("missing parameter `{}`", entry.name)))?;
            if other.tensor.shape() != entry.tensor.shape() {
                return Err(Error::Snapshot(format!("shape mismatch for `{}`", entry.name)));
            }
        }
        self.params = snap.params.clone();
        self.adam = snap.adam.clone();
        self.rng = snap.rng.restore();
        self.epoch = snap.epoch;
        self.seed = snap.seed;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tasks::{render_scene, Preset};

    fn scenes(n: u64) -> Vec<Scene> {
        let cfg = BenchmarkConfig::preset(Preset::BalancedSmall, 7);
        (0..n).map(|i| render_scene(&cfg, i)).collect()
    }

    #[test]
    fn initialization_is_seeded() {
        let a = MtlModel::build(ArchConfig::default(), 1).unwrap();
        let b = MtlModel::build(ArchConfig::default(), 1).unwrap();
        let c = MtlModel::build(ArchConfig::default(), 2).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn head_shapes_and_batch_extent() {
        let m = MtlModel::build(ArchConfig::default(), 0).unwrap();
        let s = scenes(8);
        let refs: Vec<&Scene> = s.iter().collect();
        let mut g = Graph::new();
        let out = m.forward_scenes(&mut g, &refs, &Task::ALL).unwrap();
        assert_eq!(g.shape(out.seg.unwrap()), &[8, 4, 16, 16]);
        assert_eq!(g.shape(out.det.unwrap()), &[8, 7, 16, 16]);
    }

    #[test]
    fn zero_weights_emit_bias() {
        let mut m = MtlModel::build(ArchConfig::default(), 0).unwrap();
        for e in m.params.iter_mut() {
            let bias = e.name.ends_with(".bias");
            for (i, v) in e.tensor.data_mut().iter_mut().enumerate() {
                *v = if bias { 0.25 + i as f64 } else { 0.0 };
            }
        }
        let s = scenes(2);
        let refs: Vec<&Scene> = s.iter().collect();
        let mut g = Graph::new();
        let out = m.forward_scenes(&mut g, &refs, &Task::ALL).unwrap();
        let seg = g.value(out.seg.unwrap());
        for (i, v) in seg.iter().enumerate() {
            let channel = (i / 256) % 4;
            assert_eq!(*v, 0.25 + channel as f64);
        }
    }

    #[test]
    fn det_parameters_do_not_touch_seg_output() {
        let mut m = MtlModel::build(ArchConfig::default(), 3).unwrap();
        let s = scenes(2);
        let refs: Vec<&Scene> = s.iter().collect();
        let mut g = Graph::new();
        let seg = m.forward_scenes(&mut g, &refs, &Task::ALL).unwrap().seg.unwrap();
        let before = g.value(seg).to_vec();
        m.params.get_mut("det.hidden.weight").unwrap().tensor.data_mut()[0] += 1.0;
        let mut g = Graph::new();
        let seg = m.forward_scenes(&mut g, &refs, &Task::ALL).unwrap().seg.unwrap();
        let after = g.value(seg).to_vec();
        assert_eq!(before, after);
    }

    #[test]
    fn bad_input_shape_is_rejected() {
        let m = MtlModel::build(ArchConfig::default(), 0).unwrap();
        let mut g = Graph::new();
        assert!(m.forward(&mut g, Tensor::zeros(&[2, 1, 8, 8]), &Task::ALL).is_err());
    }

    #[test]
    fn invalid_arch_lists_violations() {
        let arch = ArchConfig {
            trunk_channels: vec![],
            kernel: 2,
            ..ArchConfig::default()
        };
        match MtlModel::build(arch, 0) {
            Err(Error::Config(v)) => assert_eq!(v.len(), 2),
            other => panic!("{other:?}"),
        }
    }
}
