//! Synthetic hierarchical multimodal dataset generator.
//!
//! Each modality is a balanced rooted tree embedded in Euclidean space with
//! depth-decaying edge lengths; classes are the level-1 subtrees. A sample's
//! feature in a modality is the position of a random leaf of its class
//! subtree plus Gaussian noise and a per-subject offset. Deeper trees produce
//! clouds with lower δ-hyperbolicity, i.e. stronger hierarchy; the per-subject
//! shift models cross-subject distribution change.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Root edge length; edges into depth `l` have length `r0 * decay^(l-1)`.
/// The decay is aggressive so sibling subtrees separate cleanly at every
/// level; slower decay lets deep subtrees overlap and blurs the hierarchy.
pub const ROOT_EDGE_LENGTH: f64 = 1.0;
pub const EDGE_DECAY: f64 = 0.35;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModalitySpec {
    pub name: String,
    /// Tree depth (hierarchy strength), >= 1.
    pub depth: usize,
    /// Children per node, >= 2.
    pub branching: usize,
    /// Feature dimension, >= 2.
    pub dim: usize,
    /// Multiplier on the shared noise scale: modalities differ in how
    /// cleanly they carry their hierarchy (defaults to 1).
    #[serde(default = "default_noise_scale")]
    pub noise_scale: f64,
}

fn default_noise_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub modalities: Vec<ModalitySpec>,
    /// Class count; classes map to subtrees rooted at the shallowest level
    /// with at least `classes` nodes.
    pub classes: usize,
    /// Number of subjects (groups).
    pub subjects: usize,
    pub samples_per_subject: usize,
    /// Feature noise scale.
    pub noise: f64,
    /// Per-subject offset scale.
    pub subject_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// Desk-scale default: three modalities with tree depths 7, 4, and 2.
    fn default() -> Self {
        SyntheticSpec {
            // Narrow-deep to wide-shallow with comparable leaf counts, so
            // depth (not node count) is the hierarchy dial.
            // Deeper modalities carry their hierarchy more cleanly (smaller
            // noise multiplier), mirroring hierarchy-informativeness coupling.
            modalities: vec![
                ModalitySpec { name: "m_deep".into(), depth: 7, branching: 2, dim: 8, noise_scale: 0.5 },
                ModalitySpec { name: "m_mid".into(), depth: 4, branching: 4, dim: 8, noise_scale: 1.0 },
                ModalitySpec { name: "m_shallow".into(), depth: 2, branching: 12, dim: 8, noise_scale: 2.0 },
            ],
            classes: 6,
            subjects: 12,
            samples_per_subject: 12,
            noise: 0.08,
            subject_shift: 0.25,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.modalities.is_empty() {
            return Err(Error::Data("spec needs at least one modality".into()));
        }
        let mut names = std::collections::BTreeSet::new();
        for m in &self.modalities {
            if m.depth < 1 {
                return Err(Error::Data(format!("modality {}: depth must be >= 1", m.name)));
            }
            if m.branching < 2 {
                return Err(Error::Data(format!("modality {}: branching must be >= 2", m.name)));
            }
            if m.dim < 2 {
                return Err(Error::Data(format!("modality {}: dim must be >= 2", m.name)));
            }
            if class_level(m.branching, m.depth, self.classes).is_none() {
                return Err(Error::Data(format!(
                    "modality {}: classes ({}) exceed leaves of a depth-{} {}-ary tree",
                    m.name, self.classes, m.depth, m.branching
                )));
            }
            if m.noise_scale < 0.0 {
                return Err(Error::Data(format!("modality {}: noise_scale must be >= 0", m.name)));
            }
            if !names.insert(m.name.clone()) {
                return Err(Error::Data(format!("duplicate modality name {}", m.name)));
            }
        }
        if self.classes < 2 {
            return Err(Error::Data("need at least two classes".into()));
        }
        if self.subjects < 1 || self.samples_per_subject < 1 {
            return Err(Error::Data("need subjects >= 1 and samples_per_subject >= 1".into()));
        }
        if self.noise < 0.0 || self.subject_shift < 0.0 {
            return Err(Error::Data("noise scales must be non-negative".into()));
        }
        Ok(())
    }
}

/// In-memory multimodal dataset with aligned rows.
#[derive(Debug, Clone)]
pub struct MultimodalDataset {
    /// Modality names in canonical (spec) order.
    pub modalities: Vec<String>,
    pub features: BTreeMap<String, Vec<Vec<f64>>>,
    pub labels: Vec<u32>,
    pub groups: Vec<u32>,
    pub classes: usize,
    pub spec: Option<SyntheticSpec>,
}

impl MultimodalDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim_of(&self, modality: &str) -> Option<usize> {
        self.features.get(modality).and_then(|rows| rows.first().map(Vec::len))
    }

    pub fn group_ids(&self) -> Vec<u32> {
        let mut g: Vec<u32> = self.groups.clone();
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::Empty("dataset"));
        }
        if self.groups.len() != n {
            return Err(Error::dim("dataset groups", n, self.groups.len()));
        }
        for name in &self.modalities {
            let rows = self
                .features
                .get(name)
                .ok_or_else(|| Error::Data(format!("missing modality {name}")))?;
            if rows.len() != n {
                return Err(Error::dim("dataset rows", n, rows.len()));
            }
        }
        if self.labels.iter().any(|&l| l as usize >= self.classes) {
            return Err(Error::Data("label out of class range".into()));
        }
        Ok(())
    }
}

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-12);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Balanced tree embedded in R^dim. Node positions are laid out root-first;
/// each edge direction is a random unit vector orthogonalized against the
/// parent's incoming edge.
struct EmbeddedTree {
    depth: usize,
    branching: usize,
    /// positions[level][node_index_within_level]
    positions: Vec<Vec<Vec<f64>>>,
}

impl EmbeddedTree {
    fn build(rng: &mut ChaCha8Rng, depth: usize, branching: usize, dim: usize) -> Self {
        let mut positions: Vec<Vec<Vec<f64>>> = vec![vec![vec![0.0; dim]]];
        let mut parent_dirs: Vec<Vec<f64>> = vec![vec![0.0; dim]];
        for level in 1..=depth {
            let len = ROOT_EDGE_LENGTH * EDGE_DECAY.powi(level as i32 - 1);
            let prev = positions.last().unwrap().clone();
            let mut next = Vec::with_capacity(prev.len() * branching);
            let mut next_dirs = Vec::with_capacity(prev.len() * branching);
            for (parent_pos, parent_dir) in prev.iter().zip(&parent_dirs) {
                for _ in 0..branching {
                    let dir = random_direction(rng, parent_dir, dim);
                    let pos: Vec<f64> = parent_pos
                        .iter()
                        .zip(&dir)
                        .map(|(p, d)| p + len * d)
                        .collect();
                    next.push(pos);
                    next_dirs.push(dir);
                }
            }
            positions.push(next);
            parent_dirs = next_dirs;
        }
        EmbeddedTree {
            depth,
            branching,
            positions,
        }
    }

    /// Uniform random leaf of the class subtree (random walk down from the
    /// class root to a leaf). Classes own the first `C` subtrees rooted at
    /// the shallowest level wide enough to hold them.
    fn sample_class_leaf(&self, rng: &mut ChaCha8Rng, class: usize, classes: usize) -> &[f64] {
        let level = class_level(self.branching, self.depth, classes)
            .expect("validated: tree has enough leaves for the class count");
        let mut idx = class; // node index at the class level
        for _ in level..self.depth {
            let child = rng.random_range(0..self.branching);
            idx = idx * self.branching + child;
        }
        &self.positions[self.depth][idx]
    }
}

/// Shallowest level whose node count reaches `classes`, if any.
fn class_level(branching: usize, depth: usize, classes: usize) -> Option<usize> {
    let mut nodes = 1usize;
    for level in 1..=depth {
        nodes = nodes.saturating_mul(branching);
        if nodes >= classes {
            return Some(level);
        }
    }
    None
}

fn random_direction(rng: &mut ChaCha8Rng, avoid: &[f64], dim: usize) -> Vec<f64> {
    loop {
        let mut v: Vec<f64> = (0..dim).map(|_| gaussian(rng)).collect();
        // Orthogonalize against the parent edge so branches split cleanly.
        let a_norm_sq: f64 = avoid.iter().map(|x| x * x).sum();
        if a_norm_sq > 1e-24 {
            let proj: f64 = v.iter().zip(avoid).map(|(x, a)| x * a).sum::<f64>() / a_norm_sq;
            for (x, a) in v.iter_mut().zip(avoid) {
                *x -= proj * a;
            }
        }
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            for x in v.iter_mut() {
                *x /= n;
            }
            return v;
        }
    }
}

/// Generate a dataset. Deterministic under `spec.seed`.
pub fn generate(spec: &SyntheticSpec) -> Result<MultimodalDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    // Trees first, in modality order.
    let trees: Vec<EmbeddedTree> = spec
        .modalities
        .iter()
        .map(|m| EmbeddedTree::build(&mut rng, m.depth, m.branching, m.dim))
        .collect();

    // Per-(subject, modality) offsets.
    let mut offsets: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.subjects);
    for _ in 0..spec.subjects {
        let per_mod = spec
            .modalities
            .iter()
            .map(|m| (0..m.dim).map(|_| spec.subject_shift * gaussian(&mut rng)).collect())
            .collect();
        offsets.push(per_mod);
    }

    let mut features: BTreeMap<String, Vec<Vec<f64>>> = spec
        .modalities
        .iter()
        .map(|m| (m.name.clone(), Vec::new()))
        .collect();
    let mut labels = Vec::new();
    let mut groups = Vec::new();

    for subject in 0..spec.subjects {
        for s in 0..spec.samples_per_subject {
            // Balanced labels within each subject, up to rounding.
            let class = s % spec.classes;
            labels.push(class as u32);
            groups.push(subject as u32);
            for (mi, m) in spec.modalities.iter().enumerate() {
                let leaf = trees[mi].sample_class_leaf(&mut rng, class, spec.classes).to_vec();
                let row: Vec<f64> = leaf
                    .iter()
                    .zip(&offsets[subject][mi])
                    .map(|(x, off)| x + spec.noise * m.noise_scale * gaussian(&mut rng) + off)
                    .collect();
                features.get_mut(&m.name).unwrap().push(row);
            }
        }
    }

    let ds = MultimodalDataset {
        modalities: spec.modalities.iter().map(|m| m.name.clone()).collect(),
        features,
        labels,
        groups,
        classes: spec.classes,
        spec: Some(spec.clone()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Partition groups into `k` disjoint test blocks (leave-one-out when
/// `k == G`). Returns `(train_groups, test_groups)` per fold.
pub fn grouped_folds(groups: &[u32], k: usize) -> Result<Vec<(Vec<u32>, Vec<u32>)>> {
    let mut unique: Vec<u32> = groups.to_vec();
    unique.sort_unstable();
    unique.dedup();
    let g = unique.len();
    if k == 0 || k > g {
        return Err(Error::Data(format!(
            "fold count {k} must be in 1..={g} (number of groups)"
        )));
    }
    let mut folds = Vec::with_capacity(k);
    for i in 0..k {
        let lo = i * g / k;
        let hi = (i + 1) * g / k;
        let test: Vec<u32> = unique[lo..hi].to_vec();
        let train: Vec<u32> = unique
            .iter()
            .filter(|x| !test.contains(x))
            .copied()
            .collect();
        folds.push((train, test));
    }
    Ok(folds)
}

// ---------------------------------------------------------------------------
// On-disk format: manifest.json + one CSV per modality + labels.csv
// ---------------------------------------------------------------------------

pub const DATASET_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestModality {
    pub name: String,
    pub dim: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub modalities: Vec<ManifestModality>,
    pub classes: usize,
    pub subjects: usize,
    pub samples: usize,
    pub seed: Option<u64>,
    pub spec: Option<SyntheticSpec>,
}

fn format_row(row: &[f64]) -> String {
    row.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

/// Write `manifest.json`, one `<modality>.csv` per modality (header
/// `f0..f{d-1}`), and `labels.csv` (header `label,group`). UTF-8, LF endings,
/// shortest round-trip decimal floats.
pub fn write_dataset(ds: &MultimodalDataset, dir: &Path) -> Result<()> {
    ds.validate()?;
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        format_version: DATASET_FORMAT_VERSION,
        modalities: ds
            .modalities
            .iter()
            .map(|name| ManifestModality {
                name: name.clone(),
                dim: ds.dim_of(name).unwrap_or(0),
                file: format!("{name}.csv"),
            })
            .collect(),
        classes: ds.classes,
        subjects: ds.group_ids().len(),
        samples: ds.len(),
        seed: ds.spec.as_ref().map(|s| s.seed),
        spec: ds.spec.clone(),
    };
    let mut manifest_json = serde_json::to_string_pretty(&manifest)?;
    manifest_json.push('\n');
    std::fs::write(dir.join("manifest.json"), manifest_json)?;

    for name in &ds.modalities {
        let rows = &ds.features[name];
        let d = rows[0].len();
        let header: Vec<String> = (0..d).map(|i| format!("f{i}")).collect();
        let mut out = String::with_capacity(rows.len() * d * 8);
        out.push_str(&header.join(","));
        out.push('\n');
        for row in rows {
            out.push_str(&format_row(row));
            out.push('\n');
        }
        std::fs::write(dir.join(format!("{name}.csv")), out)?;
    }

    let mut labels = String::from("label,group\n");
    for (l, g) in ds.labels.iter().zip(&ds.groups) {
        labels.push_str(&format!("{l},{g}\n"));
    }
    std::fs::write(dir.join("labels.csv"), labels)?;
    Ok(())
}

/// Parse a numeric CSV with a header row.
pub fn read_csv_matrix(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data(format!("{}: empty file", path.display())))?;
    let width = header.split(',').count();
    let mut rows = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let row: Vec<f64> = line
            .split(',')
            .map(|cell| {
                cell.trim().parse::<f64>().map_err(|_| {
                    Error::Data(format!(
                        "{}: row {} has non-numeric cell `{cell}`",
                        path.display(),
                        i + 2
                    ))
                })
            })
            .collect::<Result<_>>()?;
        if row.len() != width {
            return Err(Error::Data(format!(
                "{}: row {} has {} cells, expected {width}",
                path.display(),
                i + 2,
                row.len()
            )));
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn read_dataset(dir: &Path) -> Result<MultimodalDataset> {
    let manifest_text = std::fs::read_to_string(dir.join("manifest.json"))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            supported: DATASET_FORMAT_VERSION,
        });
    }
    let mut features = BTreeMap::new();
    let mut modalities = Vec::new();
    for m in &manifest.modalities {
        let rows = read_csv_matrix(&dir.join(&m.file))?;
        if rows.first().map(Vec::len) != Some(m.dim) {
            return Err(Error::Data(format!(
                "modality {}: dim mismatch with manifest",
                m.name
            )));
        }
        modalities.push(m.name.clone());
        features.insert(m.name.clone(), rows);
    }
    let labels_raw = read_csv_matrix(&dir.join("labels.csv"))?;
    let mut labels = Vec::with_capacity(labels_raw.len());
    let mut groups = Vec::with_capacity(labels_raw.len());
    for row in &labels_raw {
        if row.len() != 2 {
            return Err(Error::Data("labels.csv needs columns label,group".into()));
        }
        labels.push(row[0] as u32);
        groups.push(row[1] as u32);
    }
    let ds = MultimodalDataset {
        modalities,
        features,
        labels,
        groups,
        classes: manifest.classes,
        spec: manifest.spec,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> SyntheticSpec {
        SyntheticSpec {
            modalities: vec![
                ModalitySpec { name: "a".into(), depth: 2, branching: 3, dim: 4, noise_scale: 1.0 },
                ModalitySpec { name: "b".into(), depth: 3, branching: 3, dim: 5, noise_scale: 1.0 },
            ],
            classes: 3,
            subjects: 4,
            samples_per_subject: 6,
            noise: 0.02,
            subject_shift: 0.1,
            seed: 11,
        }
    }

    #[test]
    fn degenerate_tree_clusters_exactly() {
        let spec = SyntheticSpec {
            modalities: vec![ModalitySpec { name: "m".into(), depth: 1, branching: 3, dim: 4, noise_scale: 1.0 }],
            classes: 3,
            subjects: 2,
            samples_per_subject: 9,
            noise: 0.0,
            subject_shift: 0.0,
            seed: 1,
        };
        let ds = generate(&spec).unwrap();
        // With depth 1 and zero noise, every class collapses to one point.
        let rows = &ds.features["m"];
        let mut by_class: BTreeMap<u32, Vec<&Vec<f64>>> = BTreeMap::new();
        for (row, &label) in rows.iter().zip(&ds.labels) {
            by_class.entry(label).or_default().push(row);
        }
        assert_eq!(by_class.len(), 3);
        let mut centers = Vec::new();
        for (_, members) in by_class {
            for m in &members {
                assert_eq!(*m, members[0]);
            }
            centers.push(members[0].clone());
        }
        assert_ne!(centers[0], centers[1]);
        assert_ne!(centers[1], centers[2]);
    }

    #[test]
    fn generation_is_seed_deterministic() {
        let spec = tiny_spec();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.groups, b.groups);
        for m in &a.modalities {
            assert_eq!(a.features[m], b.features[m]);
        }
        let mut spec2 = spec;
        spec2.seed += 1;
        let c = generate(&spec2).unwrap();
        assert_ne!(a.features["a"], c.features["a"]);
    }

    #[test]
    fn labels_balanced_within_subject() {
        let ds = generate(&tiny_spec()).unwrap();
        for subject in ds.group_ids() {
            let mut counts = vec![0usize; ds.classes];
            for (l, g) in ds.labels.iter().zip(&ds.groups) {
                if *g == subject {
                    counts[*l as usize] += 1;
                }
            }
            let max = counts.iter().max().unwrap();
            let min = counts.iter().min().unwrap();
            assert!(max - min <= 1, "unbalanced: {counts:?}");
        }
    }

    #[test]
    fn folds_partition_groups() {
        // Leave-one-out.
        let groups: Vec<u32> = (0..10).collect();
        let folds = grouped_folds(&groups, 10).unwrap();
        assert_eq!(folds.len(), 10);
        for (train, test) in &folds {
            assert_eq!(test.len(), 1);
            assert_eq!(train.len(), 9);
            assert!(!train.iter().any(|g| test.contains(g)));
        }

        // 20 groups in 10 folds: 2 test groups each, disjoint cover.
        let groups: Vec<u32> = (0..20).collect();
        let folds = grouped_folds(&groups, 10).unwrap();
        let mut seen = Vec::new();
        for (train, test) in &folds {
            assert_eq!(test.len(), 2);
            assert!(!train.iter().any(|g| test.contains(g)));
            seen.extend_from_slice(test);
        }
        seen.sort_unstable();
        assert_eq!(seen, groups);

        assert!(grouped_folds(&groups, 21).is_err());
    }

    #[test]
    fn roundtrip_through_disk() {
        let dir = std::env::temp_dir().join(format!("moce-synth-{}", std::process::id()));
        let _ = std::fs::remove_dir_all(&dir);
        let ds = generate(&tiny_spec()).unwrap();
        write_dataset(&ds, &dir).unwrap();
        let back = read_dataset(&dir).unwrap();
        assert_eq!(ds.labels, back.labels);
        assert_eq!(ds.groups, back.groups);
        for m in &ds.modalities {
            assert_eq!(ds.features[m], back.features[m]);
        }
        // Writes are byte-identical for identical datasets.
        let dir2 = dir.with_extension("second");
        let _ = std::fs::remove_dir_all(&dir2);
        write_dataset(&ds, &dir2).unwrap();
        for file in ["manifest.json", "a.csv", "b.csv", "labels.csv"] {
            let x = std::fs::read(dir.join(file)).unwrap();
            let y = std::fs::read(dir2.join(file)).unwrap();
            assert_eq!(x, y, "{file} differs");
        }
        let _ = std::fs::remove_dir_all(&dir);
        let _ = std::fs::remove_dir_all(&dir2);
    }

    #[test]
    fn spec_validation() {
        let mut bad = tiny_spec();
        bad.classes = 100; // exceeds total leaves of the depth-2 modality
        assert!(generate(&bad).is_err());
        let mut bad = tiny_spec();
        bad.modalities[0].dim = 1;
        assert!(generate(&bad).is_err());
        let mut bad = tiny_spec();
        bad.modalities[1].name = "a".into();
        assert!(generate(&bad).is_err());
    }
}
