//! Bilateral attention fusion of the coarse semantic grid with the fine
//! detail grid.
//!
//! Each coarse token owns the 2×2 block of fine tokens under it. The
//! top-down branch lets a coarse token attend over its four fine tokens; the
//! bottom-up branch lets each fine token attend to its single owning coarse
//! token. The fused output keeps the coarse geometry:
//! `V = sem + top_down + cell_mean(bottom_up)`.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{contract, Result};
use crate::params::{Group, ParamId, ParamStore};
use crate::tensor::Tensor;
use crate::vision::VisualTokenGrid;

pub const CELL: usize = 4;

#[derive(Debug, Clone)]
pub struct BanWeights {
    pub q_h: ParamId,
    pub k_h: ParamId,
    pub v_h: ParamId,
    pub q_l: ParamId,
    pub k_l: ParamId,
    pub v_l: ParamId,
    pub d: usize,
}

impl BanWeights {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, d: usize, rng: &mut R) -> Result<Self> {
        let std = 1.0 / (d as f64).sqrt();
        let mut mk = |n: &str| store.add(format!("{name}.{n}"), Group::Epsilon, Tensor::randn(&[d, d], std, rng));
        Ok(Self {
            q_h: mk("q_h")?,
            k_h: mk("k_h")?,
            v_h: mk("v_h")?,
            q_l: mk("q_l")?,
            k_l: mk("k_l")?,
            v_l: mk("v_l")?,
            d,
        })
    }
}

/// Coarse-index → aligned fine indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CellMap {
    pub coarse: (usize, usize),
    pub fine: (usize, usize),
    pub cells: Vec<[usize; CELL]>,
    /// Owning coarse index for every fine index.
    pub owner: Vec<usize>,
}

impl CellMap {
    pub fn build(coarse: (usize, usize), fine: (usize, usize)) -> Result<Self> {
        if coarse.0 == 0 || coarse.1 == 0 || fine.0 != 2 * coarse.0 || fine.1 != 2 * coarse.1 {
            return Err(contract(format!(
                "fine grid {fine:?} must be exactly twice the coarse grid {coarse:?}"
            )));
        }
        let fw = fine.1;
        let mut cells = Vec::with_capacity(coarse.0 * coarse.1);
        let mut owner = vec![0; fine.0 * fine.1];
        for r in 0..coarse.0 {
            for c in 0..coarse.1 {
                let i = r * coarse.1 + c;
                let cell = [
                    2 * r * fw + 2 * c,
                    2 * r * fw + 2 * c + 1,
                    (2 * r + 1) * fw + 2 * c,
                    (2 * r + 1) * fw + 2 * c + 1,
                ];
                for &j in &cell {
                    owner[j] = i;
                }
                cells.push(cell);
            }
        }
        Ok(Self {
            coarse,
            fine,
            cells,
            owner,
        })
    }

    pub fn coarse_count(&self) -> usize {
        self.cells.len()
    }

    pub fn fine_count(&self) -> usize {
        self.owner.len()
    }

    /// Fine indices listed cell by cell.
    pub fn cell_order(&self) -> Vec<usize> {
        self.cells.iter().flatten().copied().collect()
    }

    /// `coarse × fine` averaging matrix.
    pub fn pool_matrix(&self) -> Tensor {
        let nf = self.fine_count();
        let mut p = Tensor::zeros(&[self.coarse_count(), nf]);
        for (i, cell) in self.cells.iter().enumerate() {
            for &j in cell {
                p.data_mut()[i * nf + j] = 1.0 / CELL as f64;
            }
        }
        p
    }

    fn check(&self, tape: &Tape, sem: Var, det: Var) -> Result<()> {
        let (ns, _) = tape.value(sem).dims2()?;
        let (nd, _) = tape.value(det).dims2()?;
        if ns != self.coarse_count() || nd != self.fine_count() {
            return Err(contract(format!(
                "token counts {ns}/{nd} do not match cell map {}/{}",
                self.coarse_count(),
                self.fine_count()
            )));
        }
        Ok(())
    }
}

/// Coarse tokens query the four fine tokens of their cell.
pub fn ban_top_down(
    tape: &mut Tape,
    store: &ParamStore,
    sem: Var,
    det: Var,
    w: &BanWeights,
    map: &CellMap,
) -> Result<Var> {
    map.check(tape, sem, det)?;
    let wq = tape.param(store, w.q_h);
    let wk = tape.param(store, w.k_h);
    let wv = tape.param(store, w.v_h);
    let q = tape.matmul(sem, wq)?;
    let grouped = tape.gather_rows(det, &map.cell_order())?;
    let k = tape.matmul(grouped, wk)?;
    let v = tape.matmul(grouped, wv)?;
    tape.local_attention(q, k, v, CELL, 1.0 / (w.d as f64).sqrt())
}

/// Fine tokens query their single owning coarse token. Output is in fine
/// order.
pub fn ban_bottom_up(
    tape: &mut Tape,
    store: &ParamStore,
    det: Var,
    sem: Var,
    w: &BanWeights,
    map: &CellMap,
) -> Result<Var> {
    map.check(tape, sem, det)?;
    let wq = tape.param(store, w.q_l);
    let wk = tape.param(store, w.k_l);
    let wv = tape.param(store, w.v_l);
    let q = tape.matmul(det, wq)?;
    let owners = tape.gather_rows(sem, &map.owner)?;
    let k = tape.matmul(owners, wk)?;
    let v = tape.matmul(owners, wv)?;
    tape.local_attention(q, k, v, 1, 1.0 / (w.d as f64).sqrt())
}

fn cell_pool(tape: &mut Tape, fine: Var, map: &CellMap) -> Result<Var> {
    let p = tape.constant(map.pool_matrix());
    tape.matmul(p, fine)
}

fn grid_like(sem: &VisualTokenGrid, tokens: Var) -> VisualTokenGrid {
    VisualTokenGrid { tokens, ..*sem }
}

pub fn ban_fuse(
    tape: &mut Tape,
    store: &ParamStore,
    sem: &VisualTokenGrid,
    det: &VisualTokenGrid,
    w: &BanWeights,
    map: &CellMap,
) -> Result<VisualTokenGrid> {
    let td = ban_top_down(tape, store, sem.tokens, det.tokens, w, map)?;
    let bu = ban_bottom_up(tape, store, det.tokens, sem.tokens, w, map)?;
    let pooled = cell_pool(tape, bu, map)?;
    let v = tape.add(sem.tokens, td)?;
    let v = tape.add(v, pooled)?;
    Ok(grid_like(sem, v))
}

/// Attention-free fusion: `sem + cell_mean(det)`.
pub fn ban_ablation_fuse(
    tape: &mut Tape,
    sem: &VisualTokenGrid,
    det: &VisualTokenGrid,
    map: &CellMap,
) -> Result<VisualTokenGrid> {
    map.check(tape, sem.tokens, det.tokens)?;
    let pooled = cell_pool(tape, det.tokens, map)?;
    let v = tape.add(sem.tokens, pooled)?;
    Ok(grid_like(sem, v))
}
