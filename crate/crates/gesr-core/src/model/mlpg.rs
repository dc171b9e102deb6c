use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GesrError, Result};
use crate::numerics::{Activation, Graph, Mlp, MlpSpec, ParamId, ParamStore, Var};

/// Named slices of the scoring input z. The layout is assembled per model
/// from whichever blocks the active components produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ZSegment {
    UserTower,
    ItemTower,
    TowerProduct,
    TMatch,
    TSelf,
    TCross,
    UCross,
}

pub const MOA_SEGMENTS: [ZSegment; 4] = [
    ZSegment::TMatch,
    ZSegment::TSelf,
    ZSegment::TCross,
    ZSegment::UCross,
];

/// Column layout of z: an ordered list of (segment, offset, width).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ZLayout {
    segs: Vec<(ZSegment, usize, usize)>,
}

impl ZLayout {
    pub fn new(parts: &[(ZSegment, usize)]) -> Result<Self> {
        if parts.is_empty() {
            return Err(GesrError::Config("z layout needs at least one segment".to_string()));
        }
        let mut segs = Vec::with_capacity(parts.len());
        let mut offset = 0;
        for &(seg, width) in parts {
            if width == 0 {
                return Err(GesrError::Config(format!(
                    "z segment {seg:?} has zero width"
                )));
            }
            if segs.iter().any(|&(s, _, _)| s == seg) {
                return Err(GesrError::Config(format!(
                    "z segment {seg:?} listed twice"
                )));
            }
            segs.push((seg, offset, width));
            offset += width;
        }
        Ok(ZLayout { segs })
    }

    pub fn width(&self) -> usize {
        self.segs.iter().map(|&(_, _, w)| w).sum()
    }

    pub fn segment(&self, seg: ZSegment) -> Option<(usize, usize)> {
        self.segs
            .iter()
            .find(|&&(s, _, _)| s == seg)
            .map(|&(_, o, w)| (o, w))
    }

    pub fn segments(&self) -> Vec<ZSegment> {
        self.segs.iter().map(|&(s, _, _)| s).collect()
    }

    pub fn contains(&self, seg: ZSegment) -> bool {
        self.segment(seg).is_some()
    }

    /// A selector must be nonempty, duplicate-free, and name only segments
    /// this layout actually carries.
    pub fn validate_selector(&self, selector: &[ZSegment]) -> Result<()> {
        if selector.is_empty() {
            return Err(GesrError::Config("branch selector is empty".to_string()));
        }
        for (i, seg) in selector.iter().enumerate() {
            if !self.contains(*seg) {
                return Err(GesrError::Config(format!(
                    "branch selector names segment {seg:?} absent from the z layout"
                )));
            }
            if selector[..i].contains(seg) {
                return Err(GesrError::Config(format!(
                    "branch selector repeats segment {seg:?}"
                )));
            }
        }
        Ok(())
    }

    pub fn selector_width(&self, selector: &[ZSegment]) -> Result<usize> {
        self.validate_selector(selector)?;
        Ok(selector
            .iter()
            .map(|s| self.segment(*s).map(|(_, w)| w).unwrap_or(0))
            .sum())
    }

    /// Slices the named segments out of z (in selector order) and
    /// concatenates them.
    pub fn select(&self, g: &mut Graph, z: Var, selector: &[ZSegment]) -> Result<Var> {
        self.validate_selector(selector)?;
        let mut parts = Vec::with_capacity(selector.len());
        for seg in selector {
            let (offset, width) = self.segment(*seg).unwrap();
            parts.push(g.slice_cols(z, offset, width)?);
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat_cols(&parts)
        }
    }
}

/// gate(x) = 2 * sigmoid(x W + b), elementwise in (0, 2) and exactly 1
/// when W and b are zero.
pub fn mlpg_gate(
    g: &mut Graph,
    store: &ParamStore,
    w: ParamId,
    b: ParamId,
    x: Var,
) -> Result<Var> {
    let wv = g.param(store, w);
    let bv = g.param(store, b);
    let affine = g.matmul(x, wv)?;
    let affine = g.add_row(affine, bv)?;
    let sig = g.sigmoid(affine);
    Ok(g.scale(sig, 2.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BranchKind {
    Linear,
    Nonlinear,
    ParameterizedGating,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchSpec {
    pub kind: BranchKind,
    pub selector: Vec<ZSegment>,
    /// Hidden widths for the nonlinear MLP or the gating branch's inner
    /// MLP. Empty means a single affine layer (square for the inner MLP).
    pub hidden: Vec<usize>,
}

#[derive(Debug)]
pub enum BranchParams {
    Linear {
        w: ParamId,
        b: ParamId,
    },
    Nonlinear {
        mlp: Mlp,
    },
    /// Logit(z_k) = Outer([Gate(z_k) * Inner(z_k), z_k]). Gate params are
    /// zero-initialized so the gate starts at exactly one and training
    /// moves it away only where useful.
    Gating {
        inner: Mlp,
        gate_w: ParamId,
        gate_b: ParamId,
        outer: Mlp,
    },
}

#[derive(Debug)]
pub struct Branch {
    pub selector: Vec<ZSegment>,
    pub params: BranchParams,
}

/// Multi-logit parameterized gating head: the final logit is the sum of
/// every branch's per-task logits, each branch reading its own slice of z.
#[derive(Debug)]
pub struct Mlpg {
    pub branches: Vec<Branch>,
    pub tasks: usize,
}

impl Mlpg {
    pub fn register<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        layout: &ZLayout,
        specs: &[BranchSpec],
        tasks: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if specs.is_empty() {
            return Err(GesrError::Config("scoring head needs at least one branch".to_string()));
        }
        if tasks == 0 {
            return Err(GesrError::Config("tasks must be >= 1".to_string()));
        }
        let mut branches = Vec::with_capacity(specs.len());
        for (k, spec) in specs.iter().enumerate() {
            let sel_width = layout.selector_width(&spec.selector)?;
            let name = |part: &str| format!("{prefix}.branch{k}.{part}");
            let params = match spec.kind {
                BranchKind::Linear => {
                    let w = store.register_glorot(&name("lin.w"), sel_width, tasks, rng)?;
                    let b = store.register_zeros(&name("lin.b"), 1, tasks)?;
                    BranchParams::Linear { w, b }
                }
                BranchKind::Nonlinear => {
                    let mut widths = vec![sel_width];
                    widths.extend_from_slice(&spec.hidden);
                    widths.push(tasks);
                    let mlp = Mlp::register(
                        store,
                        &name("mlp"),
                        MlpSpec::new(widths, Activation::Silu)?,
                        rng,
                    )?;
                    BranchParams::Nonlinear { mlp }
                }
                BranchKind::ParameterizedGating => {
                    let mut inner_widths = vec![sel_width];
                    if spec.hidden.is_empty() {
                        inner_widths.push(sel_width);
                    } else {
                        inner_widths.extend_from_slice(&spec.hidden);
                    }
                    let inner_out = *inner_widths.last().unwrap();
                    let inner = Mlp::register(
                        store,
                        &name("gate.inner"),
                        MlpSpec::new(inner_widths, Activation::Silu)?,
                        rng,
                    )?;
                    let gate_w = store.register_zeros(&name("gate.w"), sel_width, inner_out)?;
                    let gate_b = store.register_zeros(&name("gate.b"), 1, inner_out)?;
                    let mut outer_widths = vec![inner_out + sel_width];
                    outer_widths.extend_from_slice(&spec.hidden);
                    outer_widths.push(tasks);
                    let outer = Mlp::register(
                        store,
                        &name("gate.outer"),
                        MlpSpec::new(outer_widths, Activation::Silu)?,
                        rng,
                    )?;
                    BranchParams::Gating {
                        inner,
                        gate_w,
                        gate_b,
                        outer,
                    }
                }
            };
            branches.push(Branch {
                selector: spec.selector.clone(),
                params,
            });
        }
        Ok(Mlpg { branches, tasks })
    }

    /// Sums the branch logits: an n x tasks matrix.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        layout: &ZLayout,
        z: Var,
    ) -> Result<Var> {
        let mut total: Option<Var> = None;
        for branch in &self.branches {
            let zk = layout.select(g, z, &branch.selector)?;
            let logit = match &branch.params {
                BranchParams::Linear { w, b } => {
                    let wv = g.param(store, *w);
                    let bv = g.param(store, *b);
                    let a = g.matmul(zk, wv)?;
                    g.add_row(a, bv)?
                }
                BranchParams::Nonlinear { mlp } => mlp.forward(g, store, zk)?,
                BranchParams::Gating {
                    inner,
                    gate_w,
                    gate_b,
                    outer,
                } => {
                    let inner_out = inner.forward(g, store, zk)?;
                    let gate = mlpg_gate(g, store, *gate_w, *gate_b, zk)?;
                    let gated = g.mul(gate, inner_out)?;
                    let joined = g.concat_cols(&[gated, zk])?;
                    outer.forward(g, store, joined)?
                }
            };
            total = Some(match total {
                None => logit,
                Some(t) => g.add(t, logit)?,
            });
        }
        Ok(total.expect("register enforces at least one branch"))
    }
}

/// The default advanced-mode branch set: a linear branch over the full z,
/// a nonlinear branch over the attention blocks, and a gating branch over
/// the full z.
pub fn default_branch_specs(layout: &ZLayout, hidden: &[usize]) -> Vec<BranchSpec> {
    let all = layout.segments();
    let moa: Vec<ZSegment> = MOA_SEGMENTS
        .iter()
        .copied()
        .filter(|s| layout.contains(*s))
        .collect();
    let moa = if moa.is_empty() { all.clone() } else { moa };
    vec![
        BranchSpec {
            kind: BranchKind::Linear,
            selector: all.clone(),
            hidden: vec![],
        },
        BranchSpec {
            kind: BranchKind::Nonlinear,
            selector: moa,
            hidden: hidden.to_vec(),
        },
        BranchSpec {
            kind: BranchKind::ParameterizedGating,
            selector: all,
            hidden: hidden.to_vec(),
        },
    ]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{grad_check, DenseMatrix};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn toy_layout() -> ZLayout {
        ZLayout::new(&[
            (ZSegment::UserTower, 3),
            (ZSegment::TMatch, 2),
            (ZSegment::TSelf, 4),
        ])
        .unwrap()
    }

    #[test]
    fn layout_reports_offsets_and_widths() {
        let layout = toy_layout();
        assert_eq!(layout.width(), 9);
        assert_eq!(layout.segment(ZSegment::UserTower), Some((0, 3)));
        assert_eq!(layout.segment(ZSegment::TMatch), Some((3, 2)));
        assert_eq!(layout.segment(ZSegment::TSelf), Some((5, 4)));
        assert_eq!(layout.segment(ZSegment::UCross), None);
    }

    #[test]
    fn selector_validation_catches_misuse() {
        let layout = toy_layout();
        assert!(layout.validate_selector(&[]).is_err());
        assert!(layout.validate_selector(&[ZSegment::UCross]).is_err());
        assert!(layout
            .validate_selector(&[ZSegment::TMatch, ZSegment::TMatch])
            .is_err());
        assert!(layout
            .validate_selector(&[ZSegment::TSelf, ZSegment::UserTower])
            .is_ok());
    }

    #[test]
    fn select_concatenates_in_selector_order() {
        let layout = toy_layout();
        let mut g = Graph::inference();
        let mut z = DenseMatrix::zeros(2, 9);
        for r in 0..2 {
            for c in 0..9 {
                z.set(r, c, (r * 9 + c) as f64);
            }
        }
        let zv = g.input(z);
        let sel = layout
            .select(&mut g, zv, &[ZSegment::TSelf, ZSegment::TMatch])
            .unwrap();
        let out = g.value(sel);
        assert_eq!(out.dims(), (2, 6));
        // TSelf occupies columns 5..9, TMatch 3..5.
        assert_eq!(out.row(0), &[5.0, 6.0, 7.0, 8.0, 3.0, 4.0]);
    }

    #[test]
    fn gate_matches_the_closed_form() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let w = store.register_glorot("g.w", 3, 2, &mut rng).unwrap();
        let b = store.register_glorot("g.b", 1, 2, &mut rng).unwrap();

        let x = DenseMatrix::from_vec(2, 3, vec![0.3, -1.2, 0.8, 2.0, 0.1, -0.5]).unwrap();
        let mut g = Graph::inference();
        let xv = g.input(x.clone());
        let gate = mlpg_gate(&mut g, &store, w, b, xv).unwrap();
        let out = g.value(gate).clone();

        let wm = store.value(w);
        let bm = store.value(b);
        for r in 0..2 {
            for c in 0..2 {
                let mut a = bm.get(0, c);
                for k in 0..3 {
                    a += x.get(r, k) * wm.get(k, c);
                }
                let expect = 2.0 * crate::numerics::sigmoid(a);
                assert!((out.get(r, c) - expect).abs() < 1e-12);
                assert!(out.get(r, c) > 0.0 && out.get(r, c) < 2.0);
            }
        }
    }

    #[test]
    fn zero_gate_params_give_exactly_one() {
        let mut store = ParamStore::new();
        let w = store.register_zeros("g.w", 4, 3).unwrap();
        let b = store.register_zeros("g.b", 1, 3).unwrap();
        let mut g = Graph::inference();
        let x = g.input(DenseMatrix::from_vec(1, 4, vec![5.0, -3.0, 0.0, 100.0]).unwrap());
        let gate = mlpg_gate(&mut g, &store, w, b, x).unwrap();
        let out = g.value(gate);
        for c in 0..3 {
            assert_eq!(out.get(0, c), 1.0);
        }
    }

    #[test]
    fn forward_sums_branch_logits() {
        let layout = toy_layout();
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let specs = vec![
            BranchSpec {
                kind: BranchKind::Linear,
                selector: vec![ZSegment::UserTower],
                hidden: vec![],
            },
            BranchSpec {
                kind: BranchKind::Linear,
                selector: vec![ZSegment::TMatch, ZSegment::TSelf],
                hidden: vec![],
            },
        ];
        let mut store = ParamStore::new();
        let head = Mlpg::register(&mut store, "score", &layout, &specs, 2, &mut rng).unwrap();

        let mut z = DenseMatrix::zeros(3, 9);
        for r in 0..3 {
            for c in 0..9 {
                z.set(r, c, ((r + 1) * (c + 2)) as f64 * 0.05);
            }
        }

        let mut g = Graph::inference();
        let zv = g.input(z.clone());
        let total_var = head.forward(&mut g, &store, &layout, zv).unwrap();
        let total = g.value(total_var).clone();

        // Recompute each branch alone and sum.
        let mut expect = DenseMatrix::zeros(3, 2);
        for branch in &head.branches {
            let mut gb = Graph::inference();
            let zb = gb.input(z.clone());
            let zk = layout.select(&mut gb, zb, &branch.selector).unwrap();
            if let BranchParams::Linear { w, b } = &branch.params {
                let wv = gb.param(&store, *w);
                let bv = gb.param(&store, *b);
                let a = gb.matmul(zk, wv).unwrap();
                let a = gb.add_row(a, bv).unwrap();
                expect.add_assign(gb.value(a)).unwrap();
            } else {
                panic!("expected linear branches");
            }
        }
        assert!(total.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn neutral_gating_branch_reduces_to_outer_mlp_of_duplicated_input() {
        // With the gate at its zero-init (exactly one) and the inner MLP
        // forced to the identity, the gating branch must equal
        // Outer([z, z]).
        let layout = ZLayout::new(&[(ZSegment::TSelf, 3)]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let specs = vec![BranchSpec {
            kind: BranchKind::ParameterizedGating,
            selector: vec![ZSegment::TSelf],
            hidden: vec![], // inner becomes a square single affine layer
        }];
        let mut store = ParamStore::new();
        let head = Mlpg::register(&mut store, "score", &layout, &specs, 1, &mut rng).unwrap();

        let BranchParams::Gating { inner, outer, .. } = &head.branches[0].params else {
            panic!("expected a gating branch");
        };
        // Force inner to the identity map.
        let (iw, ib) = inner.layers()[0];
        store.get_mut(iw).value = DenseMatrix::identity(3);
        store.get_mut(ib).value.fill(0.0);

        let z = DenseMatrix::from_vec(2, 3, vec![0.4, -1.0, 2.5, 0.0, 0.7, -0.3]).unwrap();
        let mut g = Graph::inference();
        let zv = g.input(z.clone());
        let got_var = head.forward(&mut g, &store, &layout, zv).unwrap();
        let got = g.value(got_var).clone();

        let mut g2 = Graph::inference();
        let zv2 = g2.input(z.clone());
        let dup = g2.concat_cols(&[zv2, zv2]).unwrap();
        let expect_var = outer.forward(&mut g2, &store, dup).unwrap();
        let expect = g2.value(expect_var).clone();

        assert!(got.max_abs_diff(&expect).unwrap() < 1e-12);
    }

    #[test]
    fn default_branch_specs_cover_the_three_kinds() {
        let layout = ZLayout::new(&[
            (ZSegment::UserTower, 4),
            (ZSegment::ItemTower, 4),
            (ZSegment::TMatch, 2),
            (ZSegment::UCross, 6),
        ])
        .unwrap();
        let specs = default_branch_specs(&layout, &[8]);
        assert_eq!(specs.len(), 3);
        assert_eq!(specs[0].kind, BranchKind::Linear);
        assert_eq!(specs[0].selector.len(), 4);
        assert_eq!(specs[1].kind, BranchKind::Nonlinear);
        assert_eq!(specs[1].selector, vec![ZSegment::TMatch, ZSegment::UCross]);
        assert_eq!(specs[2].kind, BranchKind::ParameterizedGating);
        for s in &specs {
            assert!(layout.validate_selector(&s.selector).is_ok());
        }
    }

    #[test]
    fn mlpg_gradients_pass_the_finite_difference_check() {
        let layout = ZLayout::new(&[(ZSegment::UserTower, 3), (ZSegment::TMatch, 2)]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let specs = vec![
            BranchSpec {
                kind: BranchKind::Linear,
                selector: vec![ZSegment::UserTower, ZSegment::TMatch],
                hidden: vec![],
            },
            BranchSpec {
                kind: BranchKind::Nonlinear,
                selector: vec![ZSegment::TMatch],
                hidden: vec![4],
            },
            BranchSpec {
                kind: BranchKind::ParameterizedGating,
                selector: vec![ZSegment::UserTower],
                hidden: vec![4],
            },
        ];
        let mut store = ParamStore::new();
        let head = Mlpg::register(&mut store, "score", &layout, &specs, 2, &mut rng).unwrap();
        // Nudge the gate params off their zero init so their gradients are
        // exercised at a generic point.
        for k in 0..head.branches.len() {
            if let BranchParams::Gating { gate_w, gate_b, .. } = &head.branches[k].params {
                let (gate_w, gate_b) = (*gate_w, *gate_b);
                let wv = &mut store.get_mut(gate_w).value;
                for i in 0..wv.len() {
                    wv.data_mut()[i] = 0.05 * ((i * 7 % 11) as f64 - 5.0) / 5.0;
                }
                let bv = &mut store.get_mut(gate_b).value;
                for i in 0..bv.len() {
                    bv.data_mut()[i] = 0.03 * (i as f64 + 1.0);
                }
            }
        }

        let z = DenseMatrix::from_vec(
            2,
            5,
            vec![0.2, -0.6, 0.9, 1.1, -0.4, 0.5, 0.3, -0.8, 0.1, 0.7],
        )
        .unwrap();
        let labels = DenseMatrix::from_vec(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let worst = grad_check(&mut store, 1e-5, |g, s| {
            let zv = g.input(z.clone());
            let logits = head.forward(g, s, &layout, zv)?;
            g.bce_mean(logits, &labels)
        })
        .unwrap();
        assert!(worst < 1e-4, "worst relative error {worst}");
    }
}
