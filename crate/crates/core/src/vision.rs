//! Patch embedder, structure-query cross-attention, and top-K patch selection.

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::module::Module;
use crate::rng;
use crate::scalar::Scalar;
use crate::synth::PatchLayout;
use crate::ten::{DiffArray, Matrix, Tape, Var};
use crate::volume::Volume;

pub const QUERY_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VisionDims {
    pub layout: PatchLayout,
    pub structures: usize,
    pub d_v: usize,
    pub d_q: usize,
    pub d_a: usize,
    pub d_o: usize,
}

/// Flattens non-overlapping patches into the rows of an `N^v x patch_len` matrix.
pub fn patchify<T: Scalar>(volume: &Volume<T>, layout: &PatchLayout) -> Result<Matrix<T>> {
    if volume.extents() != layout.volume {
        return Err(Error::shape("patchify", &volume.extents(), &layout.volume));
    }
    let (n, len) = (layout.num_patches(), layout.patch_len());
    let mut data = Vec::with_capacity(n * len);
    for p in 0..n {
        for k in 0..len {
            data.push(volume.get(layout.voxel(p, k)));
        }
    }
    Matrix::from_vec(n, len, data)
}

/// `F^v`: patch embeddings of one volume plus the grid they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid<T> {
    pub subject_id: String,
    pub features: Matrix<T>,
    pub grid: [usize; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionResult<T> {
    /// `N^s x N^v`, rows are distributions.
    pub attention: Matrix<T>,
    /// `N^s x d_o`
    pub observations: Matrix<T>,
}

/// `T^s`: K patch embeddings per structure with their provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedPatches<T> {
    /// `(structure, patch)` per row of `tokens`.
    pub provenance: Vec<(usize, usize)>,
    pub tokens: Matrix<T>,
}

/// Trainable visual side: affine patch embedder plus `Q^v`, `W^v_0..2`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisionModel<T> {
    pub dims: VisionDims,
    pub embed_w: DiffArray<T>,
    pub embed_b: DiffArray<T>,
    pub queries: DiffArray<T>,
    pub w0: DiffArray<T>,
    pub w1: DiffArray<T>,
    pub w2: DiffArray<T>,
}

fn glorot<T: Scalar>(r: &mut rng::Rng, rows: usize, cols: usize) -> DiffArray<T> {
    DiffArray::new(rng::normal(r, rows, cols, 1.0 / (rows as f64).sqrt()))
}

impl<T: Scalar> VisionModel<T> {
    pub fn new(dims: VisionDims, seed: u64) -> Self {
        let mut r = rng::derive(seed, "vision");
        let len = dims.layout.patch_len();
        Self {
            dims,
            embed_w: glorot(&mut r, len, dims.d_v),
            embed_b: DiffArray::new(Matrix::zeros(1, dims.d_v)),
            queries: DiffArray::new(rng::normal(&mut r, dims.structures, dims.d_q, QUERY_INIT_STD)),
            w0: glorot(&mut r, dims.d_q, dims.d_a),
            w1: glorot(&mut r, dims.d_v, dims.d_a),
            w2: glorot(&mut r, dims.d_v, dims.d_o),
        }
    }

    /// `F^v = patches W_e + b_e` on the tape; `vars` come from [`Module::bind`].
    pub fn embed_on(&self, tape: &mut Tape<T>, vars: &[Var], patches: Var) -> Result<Var> {
        let xw = tape.matmul(patches, vars[0])?;
        tape.add_row(xw, vars[1])
    }

    /// Query cross-attention over patch features on the tape; returns `(A^v, S^v)`.
    pub fn observe_on(&self, tape: &mut Tape<T>, vars: &[Var], features: Var) -> Result<(Var, Var)> {
        let [_, _, q, w0, w1, w2] = vars[..] else {
            unreachable!("six vision parameters")
        };
        let qk = tape.matmul(q, w0)?;
        let fk = tape.matmul(features, w1)?;
        let logits = tape.matmul_t(qk, fk)?;
        let a = tape.softmax_rows(logits);
        let fv = tape.matmul(features, w2)?;
        let s = tape.matmul(a, fv)?;
        Ok((a, s))
    }

    pub fn embed_patches(&self, patches: &Matrix<T>) -> Result<Matrix<T>> {
        let mut out = patches.matmul(&self.embed_w.value)?;
        let b = self.embed_b.value.row(0);
        for r in 0..out.rows() {
            for (x, &bi) in out.row_mut(r).iter_mut().zip(b) {
                *x += bi;
            }
        }
        Ok(out)
    }

    pub fn embed_volume(&self, subject_id: &str, volume: &Volume<T>) -> Result<PatchGrid<T>> {
        let patches = patchify(volume, &self.dims.layout)?;
        Ok(PatchGrid {
            subject_id: subject_id.to_string(),
            features: self.embed_patches(&patches)?,
            grid: self.dims.layout.grid(),
        })
    }

    pub fn observe(&self, grid: &PatchGrid<T>) -> Result<AttentionResult<T>> {
        observe(
            &grid.features,
            &self.queries.value,
            &self.w0.value,
            &self.w1.value,
            &self.w2.value,
        )
    }

    pub fn freeze(&mut self) {
        self.set_trainable(false);
    }

    pub fn save_into(&self, ck: &mut Checkpoint) {
        Module::save_into(self, "vision", ck);
    }

    pub fn load_from(&mut self, ck: &Checkpoint) -> Result<()> {
        Module::load_from(self, "vision", ck)
    }
}

impl<T: Scalar> Module<T> for VisionModel<T> {
    fn params(&self) -> Vec<(&str, &DiffArray<T>)> {
        vec![
            ("embed_w", &self.embed_w),
            ("embed_b", &self.embed_b),
            ("queries", &self.queries),
            ("w0", &self.w0),
            ("w1", &self.w1),
            ("w2", &self.w2),
        ]
    }

    fn params_mut(&mut self) -> Vec<(&str, &mut DiffArray<T>)> {
        vec![
            ("embed_w", &mut self.embed_w),
            ("embed_b", &mut self.embed_b),
            ("queries", &mut self.queries),
            ("w0", &mut self.w0),
            ("w1", &mut self.w1),
            ("w2", &mut self.w2),
        ]
    }
}

/// `A^v = softmax_rows(Q W0 (F W1)^T)`, `S^v = A^v (F W2)`.
pub fn observe<T: Scalar>(
    features: &Matrix<T>,
    queries: &Matrix<T>,
    w0: &Matrix<T>,
    w1: &Matrix<T>,
    w2: &Matrix<T>,
) -> Result<AttentionResult<T>> {
    let logits = queries.matmul(w0)?.matmul_t(&features.matmul(w1)?)?;
    let attention = crate::ten::softmax_rows(&logits);
    let observations = attention.matmul(&features.matmul(w2)?)?;
    Ok(AttentionResult {
        attention,
        observations,
    })
}

/// Indices of the `k` largest entries of `row`, descending, ties to the lower index.
pub fn top_k<T: Scalar>(row: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn select_patches<T: Scalar>(
    attention: &Matrix<T>,
    features: &Matrix<T>,
    k: usize,
) -> Result<SelectedPatches<T>> {
    if k == 0 || k > features.rows() {
        return Err(Error::Param(format!("K = {k} must be in 1..={}", features.rows())));
    }
    if attention.cols() != features.rows() {
        return Err(Error::shape("select_patches", &attention.shape(), &features.shape()));
    }
    let mut provenance = Vec::with_capacity(k * attention.rows());
    for s in 0..attention.rows() {
        provenance.extend(top_k(attention.row(s), k).into_iter().map(|p| (s, p)));
    }
    let idx: Vec<usize> = provenance.iter().map(|&(_, p)| p).collect();
    Ok(SelectedPatches {
        tokens: features.select_rows(&idx),
        provenance,
    })
}

/// Per-case output of the frozen visual side, as consumed by the decoder.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures<T> {
    /// `S^v`, `N^s x d_o`
    pub observations: Matrix<T>,
    /// `T^s`, `K N^s x d_v`
    pub selected: Matrix<T>,
}

impl<T: Scalar> VisionModel<T> {
    pub fn features(&self, subject_id: &str, volume: &Volume<T>, k: usize) -> Result<VisualFeatures<T>> {
        let grid = self.embed_volume(subject_id, volume)?;
        let res = self.observe(&grid)?;
        let sel = select_patches(&res.attention, &grid.features, k)?;
        Ok(VisualFeatures {
            observations: res.observations,
            selected: sel.tokens,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> VisionDims {
        VisionDims {
            layout: PatchLayout::new([8, 8, 4], [4, 4, 2]).unwrap(),
            structures: 3,
            d_v: 6,
            d_q: 5,
            d_a: 4,
            d_o: 7,
        }
    }

    #[test]
    fn patch_count_arithmetic() {
        let lay = PatchLayout::new([16, 16, 8], [4, 4, 4]).unwrap();
        let p = patchify(&Volume::<f64>::zeros([16, 16, 8]), &lay).unwrap();
        assert_eq!(p.shape(), [32, 64]);
        assert!(patchify(&Volume::<f64>::zeros([16, 16, 4]), &lay).is_err());
    }

    #[test]
    fn zero_volume_gives_bias() {
        let mut m = VisionModel::<f64>::new(dims(), 1);
        m.embed_b.value = Matrix::row_vector(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let g = m.embed_volume("x", &Volume::zeros([8, 8, 4])).unwrap();
        for r in 0..g.features.rows() {
            assert_eq!(g.features.row(r), m.embed_b.value.row(0));
        }
    }

    #[test]
    fn tape_and_plain_forward_agree() {
        let m = VisionModel::<f64>::new(dims(), 3);
        let f = rng::normal::<f64>(&mut rng::seeded(4), 8, 6, 1.0);
        let plain = m.observe(&PatchGrid { subject_id: String::new(), features: f.clone(), grid: [2, 2, 2] }).unwrap();
        let mut tape = Tape::new();
        let vars = m.bind(&mut tape);
        let fv = tape.constant(f);
        let (a, s) = m.observe_on(&mut tape, &vars, fv).unwrap();
        assert_eq!(tape.value(a), &plain.attention);
        assert_eq!(tape.value(s), &plain.observations);
    }

    #[test]
    fn top_k_ties_and_order() {
        assert_eq!(top_k(&[0.25f64; 4], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.1f64, 0.5, 0.2, 0.5], 3), vec![1, 3, 2]);
    }

    #[test]
    fn select_rejects_large_k() {
        let a = Matrix::<f64>::filled(2, 3, 1.0 / 3.0);
        let f = Matrix::<f64>::zeros(3, 4);
        assert!(matches!(select_patches(&a, &f, 4), Err(Error::Param(_))));
        let s = select_patches(&a, &f, 3).unwrap();
        assert_eq!(s.tokens.shape(), [6, 4]);
    }
}
