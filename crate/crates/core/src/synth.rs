//! Deterministic paired volume/report corpus with controllable findings.
//!
//! Each named structure owns a fixed set of patches (patch `p` belongs to
//! structure `p mod (S + 1)` when that is below `S`, otherwise to the
//! background) and a fixed random marker pattern. A structure's state picks
//! one of nine templated sentences (three descriptors for normal, three for
//! each of two abnormalities) and writes a constant block, whose position
//! encodes the sentence and whose magnitude encodes the finding, into every
//! patch of the structure's region.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::report::{split_sentences, StructureCatalog};
use crate::rng;
use crate::scalar::Scalar;
use crate::volume::Volume;

/// Sentence templates and finding phrases for one structure.
struct Template {
    structure: &'static str,
    findings: [&'static str; 2],
    normal: [&'static str; 3],
    abnormal: [[&'static str; 3]; 2],
}

const TEMPLATES: &[Template] = &[
    Template {
        structure: "lung",
        findings: ["nodule", "consolidation"],
        normal: [
            "The lungs are clear.",
            "The lung parenchyma is normal.",
            "No nodule or consolidation is seen in the lungs.",
        ],
        abnormal: [
            [
                "There is a small nodule in the lung.",
                "There is a large nodule in the lung.",
                "Multiple nodules are seen in the lung.",
            ],
            [
                "There is patchy consolidation in the lung.",
                "There is dense consolidation in the lung.",
                "Extensive consolidation involves both lungs.",
            ],
        ],
    },
    Template {
        structure: "trachea and bronchie",
        findings: ["bronchiectasis", "mucus plugging"],
        normal: [
            "The trachea and bronchi are patent.",
            "The central airways including the trachea are normal.",
            "The bronchi are normal in caliber.",
        ],
        abnormal: [
            [
                "Mild bronchiectasis is present.",
                "Moderate bronchiectasis is present.",
                "Severe bronchiectasis is present.",
            ],
            [
                "Mucus plugging is seen in the trachea.",
                "Mucus plugging is seen in the bronchi.",
                "Extensive mucus plugging fills the bronchi.",
            ],
        ],
    },
    Template {
        structure: "mediastinum and heart",
        findings: ["cardiomegaly", "lymphadenopathy"],
        normal: [
            "The heart size is normal.",
            "The mediastinum is unremarkable.",
            "No cardiomegaly or mediastinal lymphadenopathy.",
        ],
        abnormal: [
            [
                "Mild cardiomegaly is noted.",
                "Moderate cardiomegaly is noted.",
                "Marked cardiomegaly is noted.",
            ],
            [
                "Mild mediastinal lymphadenopathy is present.",
                "Bulky mediastinal lymphadenopathy is present.",
                "Scattered mediastinal lymphadenopathy is noted.",
            ],
        ],
    },
    Template {
        structure: "esophagus",
        findings: ["hernia", "dilatation"],
        normal: [
            "The esophagus is normal.",
            "The esophagus is unremarkable in caliber.",
            "No esophageal hernia or dilatation.",
        ],
        abnormal: [
            [
                "There is a small hiatal hernia near the esophagus.",
                "There is a large hiatal hernia near the esophagus.",
                "A sliding hiatal hernia involves the esophagus.",
            ],
            [
                "Mild esophageal dilatation is noted.",
                "Marked esophageal dilatation is noted.",
                "Diffuse esophageal dilatation with fluid is noted.",
            ],
        ],
    },
    Template {
        structure: "pleura",
        findings: ["pleural effusion", "pneumothorax"],
        normal: [
            "No pleural effusion.",
            "The pleura is unremarkable.",
            "No pleural effusion or pneumothorax.",
        ],
        abnormal: [
            [
                "There is a small pleural effusion.",
                "There is a moderate pleural effusion.",
                "There is a large pleural effusion.",
            ],
            [
                "There is a small pneumothorax in the pleural space.",
                "There is a large pneumothorax in the pleural space.",
                "A loculated pneumothorax is seen along the pleura.",
            ],
        ],
    },
    Template {
        structure: "bone",
        findings: ["fracture", "lytic lesion"],
        normal: [
            "The bones are intact.",
            "No fracture or lytic lesion in the bones.",
            "Osseous structures are unremarkable.",
        ],
        abnormal: [
            [
                "There is an acute rib fracture.",
                "There is a healing rib fracture.",
                "There is a vertebral compression fracture.",
            ],
            [
                "There is a lytic lesion in the bone.",
                "Multiple lytic lesions are seen in the bones.",
                "A large lytic lesion involves a vertebra.",
            ],
        ],
    },
    Template {
        structure: "thyroid",
        findings: ["goiter", "cyst"],
        normal: [
            "The thyroid gland is normal.",
            "The thyroid is unremarkable.",
            "No thyroid goiter or cyst.",
        ],
        abnormal: [
            [
                "There is a small thyroid goiter.",
                "There is a large thyroid goiter.",
                "A multinodular thyroid goiter is present.",
            ],
            [
                "There is a small thyroid cyst.",
                "There is a large thyroid cyst.",
                "Multiple thyroid cysts are present.",
            ],
        ],
    },
    Template {
        structure: "breast",
        findings: ["mass", "calcification"],
        normal: [
            "The breasts are unremarkable.",
            "Breast tissue is normal.",
            "No breast mass or calcification.",
        ],
        abnormal: [
            [
                "There is a small breast mass.",
                "There is a large breast mass.",
                "An irregular breast mass is present.",
            ],
            [
                "Scattered breast calcification is noted.",
                "Clustered breast calcification is noted.",
                "Coarse breast calcification is noted.",
            ],
        ],
    },
    Template {
        structure: "abdomen",
        findings: ["steatosis", "ascites"],
        normal: [
            "The visualized abdomen is unremarkable.",
            "The liver is normal.",
            "No hepatic steatosis or ascites in the abdomen.",
        ],
        abnormal: [
            [
                "There is mild hepatic steatosis.",
                "There is moderate hepatic steatosis.",
                "There is severe hepatic steatosis.",
            ],
            [
                "There is a small amount of ascites in the abdomen.",
                "There is a large amount of ascites in the abdomen.",
                "There is abdominal ascites.",
            ],
        ],
    },
];

pub const ABNORMALITIES_PER_STRUCTURE: usize = 2;
pub const VARIANTS: usize = 3;
/// Distinct sentences per structure.
pub const STATES_PER_STRUCTURE: usize = VARIANTS * (1 + ABNORMALITIES_PER_STRUCTURE);

const FILLER: &str = "The study is of diagnostic quality.";

const NEGATION_CUES: [&str; 2] = ["no", "without"];

/// Abnormality phrases of the named structures of a catalog, in label order.
#[derive(Clone, Debug)]
pub struct Taxonomy {
    structures: Vec<usize>,
    phrases: Vec<String>,
    names: Vec<String>,
}

fn template(name: &str) -> Result<&'static Template> {
    TEMPLATES
        .iter()
        .find(|t| t.structure == name)
        .ok_or_else(|| Error::Config(format!("no report templates for structure {name:?}")))
}

impl Taxonomy {
    pub fn for_catalog(catalog: &StructureCatalog) -> Result<Self> {
        let mut structures = Vec::new();
        let mut phrases = Vec::new();
        let mut names = Vec::new();
        for s in 0..catalog.named_len() {
            let t = template(catalog.name(s))?;
            for f in t.findings {
                structures.push(s);
                phrases.push(f.to_string());
                names.push(format!("{}/{}", t.structure, f));
            }
        }
        Ok(Self {
            structures,
            phrases,
            names,
        })
    }

    pub fn len(&self) -> usize {
        self.phrases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phrases.is_empty()
    }

    pub fn label_names(&self) -> &[String] {
        &self.names
    }

    pub fn structure_of(&self, label: usize) -> usize {
        self.structures[label]
    }

    /// Every sentence the generator can emit for structure `s`, indexed by state code.
    pub fn sentences(catalog: &StructureCatalog, s: usize) -> Result<Vec<&'static str>> {
        let t = template(catalog.name(s))?;
        let mut out = t.normal.to_vec();
        for a in &t.abnormal {
            out.extend_from_slice(a);
        }
        Ok(out)
    }
}

fn negated(before: &str) -> bool {
    before
        .split(|c: char| !c.is_alphanumeric())
        .any(|w| NEGATION_CUES.contains(&w))
}

/// Rule labeler: a finding is positive when its phrase occurs in a sentence
/// with no negation cue ("no", "without") earlier in that sentence.
pub fn label_report(report: &str, taxonomy: &Taxonomy) -> Vec<u8> {
    let mut labels = vec![0u8; taxonomy.len()];
    for sentence in split_sentences(report) {
        let lower = sentence.to_lowercase();
        for (k, phrase) in taxonomy.phrases.iter().enumerate() {
            if lower
                .match_indices(phrase.as_str())
                .any(|(i, _)| !negated(&lower[..i]))
            {
                labels[k] = 1;
            }
        }
    }
    labels
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::Config(format!("unknown split {s:?}"))),
        }
    }
}

/// State of one structure: which finding (if any) and which descriptor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureState {
    pub abnormality: Option<usize>,
    pub variant: usize,
}

impl StructureState {
    /// Index into the structure's sentence list.
    pub fn code(&self) -> usize {
        self.abnormality.map_or(0, |a| a + 1) * VARIANTS + self.variant
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub subject_id: String,
    pub states: Vec<StructureState>,
    pub seed: u64,
}

/// One paired case. `labels` and `states` are known for synthetic data.
#[derive(Clone, Debug, PartialEq)]
pub struct Case<T> {
    pub id: String,
    pub volume: Volume<T>,
    pub report: String,
    pub labels: Option<Vec<u8>>,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub n: usize,
    /// Named structures taken from the front of the catalog.
    pub structures: usize,
    pub prevalence: f64,
    pub seed: u64,
    pub volume: [usize; 3],
    pub patch: [usize; 3],
    pub noise_std: f64,
    pub marker_amp: f64,
    pub imprint_amp: f64,
    /// Train / val / test fractions.
    pub splits: [f64; 3],
    /// Appends a sentence that matches no structure keyword.
    pub filler: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n: 256,
            structures: 4,
            prevalence: 0.3,
            seed: 7,
            volume: [32, 32, 16],
            patch: [8, 8, 8],
            noise_std: 0.5,
            marker_amp: 1.0,
            imprint_amp: 1.0,
            splits: [0.6, 0.2, 0.2],
            filler: false,
        }
    }
}

/// Patch grid geometry shared by the generator and the patch embedder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchLayout {
    pub volume: [usize; 3],
    pub patch: [usize; 3],
}

impl PatchLayout {
    pub fn new(volume: [usize; 3], patch: [usize; 3]) -> Result<Self> {
        for a in 0..3 {
            if patch[a] == 0 || volume[a] == 0 || volume[a] % patch[a] != 0 {
                return Err(Error::shape("patch layout", &volume, &patch));
            }
        }
        Ok(Self { volume, patch })
    }

    pub fn grid(&self) -> [usize; 3] {
        [
            self.volume[0] / self.patch[0],
            self.volume[1] / self.patch[1],
            self.volume[2] / self.patch[2],
        ]
    }

    pub fn num_patches(&self) -> usize {
        self.grid().iter().product()
    }

    pub fn patch_len(&self) -> usize {
        self.patch.iter().product()
    }

    /// Volume coordinate of voxel `k` (row-major within the patch) of patch `p`.
    pub fn voxel(&self, p: usize, k: usize) -> [usize; 3] {
        let g = self.grid();
        let gp = [p / (g[1] * g[2]), (p / g[2]) % g[1], p % g[2]];
        let lp = [
            k / (self.patch[1] * self.patch[2]),
            (k / self.patch[2]) % self.patch[1],
            k % self.patch[2],
        ];
        [
            gp[0] * self.patch[0] + lp[0],
            gp[1] * self.patch[1] + lp[1],
            gp[2] * self.patch[2] + lp[2],
        ]
    }

    fn block_extent(&self) -> [usize; 3] {
        self.patch.map(|p| (p / 4).max(1))
    }

    fn blocks(&self) -> [usize; 3] {
        let b = self.block_extent();
        [self.patch[0] / b[0], self.patch[1] / b[1], self.patch[2] / b[2]]
    }

    /// In-patch voxel offsets covered by sub-block `idx`.
    fn block_voxels(&self, idx: usize) -> Vec<usize> {
        let (b, n) = (self.block_extent(), self.blocks());
        let o = [idx / (n[1] * n[2]), (idx / n[2]) % n[1], idx % n[2]];
        let mut out = Vec::new();
        for i in 0..b[0] {
            for j in 0..b[1] {
                for k in 0..b[2] {
                    let l = [o[0] * b[0] + i, o[1] * b[1] + j, o[2] * b[2] + k];
                    out.push((l[0] * self.patch[1] + l[1]) * self.patch[2] + l[2]);
                }
            }
        }
        out
    }
}

/// Structure owning patch `p`, or `None` for background.
pub fn region_of(p: usize, named: usize) -> Option<usize> {
    let r = p % (named + 1);
    (r < named).then_some(r)
}

pub fn region_patches(num_patches: usize, named: usize, s: usize) -> Vec<usize> {
    (0..num_patches).filter(|&p| region_of(p, named) == Some(s)).collect()
}

fn finding_magnitude(state: StructureState) -> f64 {
    match state.abnormality {
        None => 1.0,
        Some(a) => 2.0 + a as f64,
    }
}

pub struct Generator<'a> {
    cfg: &'a GeneratorConfig,
    catalog: StructureCatalog,
    taxonomy: Taxonomy,
    layout: PatchLayout,
    markers: Vec<Vec<f64>>,
}

impl<'a> Generator<'a> {
    pub fn new(cfg: &'a GeneratorConfig, catalog: &StructureCatalog) -> Result<Self> {
        if cfg.n == 0 {
            return Err(Error::Param("corpus size must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&cfg.prevalence) {
            return Err(Error::Param(format!("prevalence {} outside [0, 1]", cfg.prevalence)));
        }
        let f = cfg.splits;
        if f.iter().any(|&x| x < 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Param(format!("split fractions {f:?} must be non-negative and sum to 1")));
        }
        let catalog = catalog.truncated(cfg.structures)?;
        let taxonomy = Taxonomy::for_catalog(&catalog)?;
        let layout = PatchLayout::new(cfg.volume, cfg.patch)?;
        if layout.num_patches() < cfg.structures + 1 {
            return Err(Error::Param(format!(
                "{} patches cannot hold {} structure regions",
                layout.num_patches(),
                cfg.structures
            )));
        }
        let nb: usize = layout.blocks().iter().product();
        if nb <= STATES_PER_STRUCTURE {
            return Err(Error::Param(format!("patch {:?} too small for finding imprints", cfg.patch)));
        }
        let markers = (0..=cfg.structures)
            .map(|s| {
                let mut r = rng::derive(cfg.seed, &format!("marker/{s}"));
                (0..layout.patch_len())
                    .map(|_| if r.gen::<bool>() { cfg.marker_amp } else { -cfg.marker_amp })
                    .collect()
            })
            .collect();
        Ok(Self {
            cfg,
            catalog,
            taxonomy,
            layout,
            markers,
        })
    }

    pub fn catalog(&self) -> &StructureCatalog {
        &self.catalog
    }

    pub fn taxonomy(&self) -> &Taxonomy {
        &self.taxonomy
    }

    pub fn layout(&self) -> PatchLayout {
        self.layout
    }

    pub fn spec(&self, index: usize) -> CaseSpec {
        let seed = self.cfg.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
        let mut r = rng::derive(seed, "states");
        let states = (0..self.cfg.structures)
            .map(|_| {
                let abnormality = (r.gen::<f64>() < self.cfg.prevalence)
                    .then(|| r.gen_range(0..ABNORMALITIES_PER_STRUCTURE));
                StructureState {
                    abnormality,
                    variant: r.gen_range(0..VARIANTS),
                }
            })
            .collect();
        CaseSpec {
            subject_id: format!("case-{index:05}"),
            states,
            seed,
        }
    }

    pub fn report(&self, spec: &CaseSpec) -> Result<String> {
        let mut parts = Vec::with_capacity(spec.states.len());
        for (s, st) in spec.states.iter().enumerate() {
            parts.push(Taxonomy::sentences(&self.catalog, s)?[st.code()]);
        }
        if self.cfg.filler {
            parts.push(FILLER);
        }
        Ok(parts.join(" "))
    }

    pub fn labels(&self, spec: &CaseSpec) -> Vec<u8> {
        let mut l = vec![0u8; self.taxonomy.len()];
        for (s, st) in spec.states.iter().enumerate() {
            if let Some(a) = st.abnormality {
                l[s * ABNORMALITIES_PER_STRUCTURE + a] = 1;
            }
        }
        l
    }

    pub fn volume<T: Scalar>(&self, spec: &CaseSpec) -> Volume<T> {
        let lay = self.layout;
        let named = self.cfg.structures;
        let mut vals = vec![0.0f64; lay.volume.iter().product()];
        let mut noise = rng::derive(spec.seed, "noise");
        let idx = |c: [usize; 3]| (c[0] * lay.volume[1] + c[1]) * lay.volume[2] + c[2];
        for p in 0..lay.num_patches() {
            let owner = region_of(p, named);
            let marker = &self.markers[owner.unwrap_or(named)];
            for (k, &m) in marker.iter().enumerate() {
                vals[idx(lay.voxel(p, k))] += m;
            }
            if let Some(s) = owner {
                let st = spec.states[s];
                let amp = self.cfg.imprint_amp * finding_magnitude(st);
                for k in lay.block_voxels(1 + st.code()) {
                    vals[idx(lay.voxel(p, k))] += amp;
                }
            }
        }
        for v in &mut vals {
            let z: f64 = StandardNormal.sample(&mut noise);
            *v += self.cfg.noise_std * z;
        }
        Volume::from_vec(lay.volume, vals.into_iter().map(T::lit).collect()).expect("layout extents")
    }

    fn splits(&self) -> Vec<Split> {
        let n = self.cfg.n;
        let n_train = (n as f64 * self.cfg.splits[0]).round() as usize;
        let n_val = ((n as f64 * self.cfg.splits[1]).round() as usize).min(n - n_train);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::derive(self.cfg.seed, "split"));
        let mut out = vec![Split::Test; n];
        for (rank, &i) in order.iter().enumerate() {
            out[i] = if rank < n_train {
                Split::Train
            } else if rank < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
        out
    }

    pub fn generate<T: Scalar>(&self) -> Result<Vec<(CaseSpec, Case<T>)>> {
        let splits = self.splits();
        (0..self.cfg.n)
            .map(|i| {
                let spec = self.spec(i);
                let case = Case {
                    id: spec.subject_id.clone(),
                    volume: self.volume(&spec),
                    report: self.report(&spec)?,
                    labels: Some(self.labels(&spec)),
                    split: splits[i],
                };
                Ok((spec, case))
            })
            .collect()
    }
}

/// Generates `cfg.n` cases from the first `cfg.structures` named structures of `catalog`.
pub fn generate_corpus<T: Scalar>(cfg: &GeneratorConfig, catalog: &StructureCatalog) -> Result<Vec<Case<T>>> {
    Ok(Generator::new(cfg, catalog)?
        .generate()?
        .into_iter()
        .map(|(_, c)| c)
        .collect())
}

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseRecord {
    pub id: String,
    pub volume: String,
    pub report: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<u8>>,
    pub split: Split,
}

/// Writes `corpus.jsonl` plus one volume file per case under `dir`.
pub fn save_corpus<T: Scalar>(dir: &Path, cases: &[Case<T>]) -> Result<PathBuf> {
    let vdir = dir.join("volumes");
    std::fs::create_dir_all(&vdir).map_err(|e| Error::io(&vdir, e))?;
    let mut lines = String::new();
    for c in cases {
        let rel = format!("volumes/{}.vol", c.id);
        c.volume.save(&dir.join(&rel))?;
        let rec = CaseRecord {
            id: c.id.clone(),
            volume: rel,
            report: c.report.clone(),
            labels: c.labels.clone(),
            split: c.split,
        };
        lines.push_str(&serde_json::to_string(&rec).expect("record serializes"));
        lines.push('\n');
    }
    let path = dir.join("corpus.jsonl");
    std::fs::write(&path, lines).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

pub fn load_corpus<T: Scalar>(path: &Path) -> Result<Vec<Case<T>>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let rec: CaseRecord = serde_json::from_str(line)
                .map_err(|e| Error::Parse(format!("{}:{}: {e}", path.display(), i + 1)))?;
            Ok(Case {
                volume: Volume::load(&base.join(&rec.volume))?,
                id: rec.id,
                report: rec.report,
                labels: rec.labels,
                split: rec.split,
            })
        })
        .collect()
}
