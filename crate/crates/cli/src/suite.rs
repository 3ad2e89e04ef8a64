//! The individual verification stages. Each returns named checks; the commands decide
//! which stages run.

use anyhow::{anyhow, Result};
use curvedflat::algebra::{form_ad_invariance, SymmetricPair};
use curvedflat::conservation::{
    closedness_residual, commuting_flows_residual, conserved_quantity, flow_residual, flux_identity_residual,
    q_generate, q_recursion_residual, ConservedReport, FlowFamily, KernelClosure, QSequence,
};
use curvedflat::convergence::{away_from_edges, ConvergenceStudy};
use curvedflat::dressing::{
    commuting_expansion_residual, dress_grid, extract_solution, loop_reality_residual, DressedGrid, FlowTerm,
    RealityLoop, COND_LIMIT,
};
use curvedflat::eds::{involutivity_report, InvolutivitySummary, ProbeOptions};
use curvedflat::grid::Grid;
use curvedflat::lax::{self, cartan_lift, curved_flat, flat_abelian, uu0_residual, CartanLift, CurvedFlat, FlatAbelian, GridField};
use curvedflat::linalg::{self, Mat};
use num_complex::Complex64;
use rayon::prelude::*;

use crate::config::{RunConfig, TamperConfig, Tolerances};
use crate::report::Check;

/// Samples of the ad-invariance test of the form.
pub const AD_INVARIANCE_SAMPLES: usize = 1000;
pub const AD_INVARIANCE_TOL: f64 = 1e-10;

/// Everything a stage needs besides grids.
pub struct Setup {
    pub pair: SymmetricPair,
    pub floop: RealityLoop,
    pub tol: Tolerances,
    pub lambdas: Vec<Complex64>,
    pub convergence: bool,
}

impl Setup {
    pub fn new(cfg: &RunConfig) -> Result<Self> {
        let pair = cfg.pair()?;
        let floop = cfg.reality_loop(&pair)?;
        Ok(Self {
            pair,
            floop,
            tol: cfg.verification.tolerances.clone(),
            lambdas: cfg.lambda_samples(),
            convergence: cfg.verification.convergence,
        })
    }

    pub fn is_vacuum(&self) -> bool {
        self.floop.f.is_identity()
    }

    fn band(&self) -> (f64, f64) {
        (self.tol.ratio_band[0], self.tol.ratio_band[1])
    }

    /// Convergence study of a residual field; with only the coarse field the check
    /// degenerates to an absolute bound.
    pub fn field_check(
        &self,
        name: &str,
        coarse: (&Grid, &[f64]),
        fine: Option<(&Grid, &[f64])>,
        keep: &dyn Fn(usize) -> bool,
        absolute: f64,
    ) -> Result<Check> {
        let (cg, cv) = coarse;
        let (cmax, node) = argmax_where(cv, keep);
        let check = match fine {
            Some((fg, fv)) => {
                let s = ConvergenceStudy::from_fields(cg, cv, fg, fv, keep)?;
                Check::converges(name, ConvergenceStudy::with_band(s.coarse, s.fine, self.band(), self.tol.floor))
            }
            None => Check::at_most(name, cmax, absolute),
        };
        Ok(check.at(cg.point(node)))
    }

    pub fn maxima_check(&self, name: &str, coarse: f64, fine: Option<f64>, absolute: f64) -> Check {
        match fine {
            Some(f) => Check::converges(name, ConvergenceStudy::with_band(coarse, f, self.band(), self.tol.floor)),
            None => Check::at_most(name, coarse, absolute),
        }
    }
}

fn argmax_where(vals: &[f64], keep: &dyn Fn(usize) -> bool) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &v) in vals.iter().enumerate() {
        // NaN wins so that it is reported
        if keep(k) && (v > best.0 || v.is_nan()) && !best.0.is_nan() {
            best = (v, k);
        }
    }
    best
}

fn all(_: usize) -> bool {
    true
}

/// Node of `grid` nearest to `point`.
pub fn nearest_node(grid: &Grid, point: &[f64]) -> usize {
    let multi: Vec<usize> = point
        .iter()
        .enumerate()
        .map(|(a, &x)| {
            let ax = grid.axis(a);
            let idx = ((x - ax.min) / grid.h(a)).round();
            idx.clamp(0.0, (ax.points - 1) as f64) as usize
        })
        .collect();
    grid.index(&multi)
}

pub fn algebra_checks(pair: &SymmetricPair, seed: u64) -> Vec<Check> {
    let mut out: Vec<Check> = pair
        .check_invariants()
        .into_iter()
        .map(|inv| Check {
            passed: inv.passed,
            ..Check::at_most(format!("algebra.{}", inv.name), inv.residual, inv.tolerance)
        })
        .collect();
    out.push(Check::at_most(
        "algebra.form_ad_invariance",
        form_ad_invariance(pair, AD_INVARIANCE_SAMPLES, seed),
        AD_INVARIANCE_TOL,
    ));
    out
}

/// A dressed grid with its extracted solution. `v` is `None` when extraction failed.
pub struct Level {
    pub dressed: DressedGrid,
    pub v: Option<GridField>,
    pub extraction_error: Option<String>,
}

impl Level {
    pub fn build(setup: &Setup, grid: &Grid, flows: &[FlowTerm], tamper: Option<&TamperConfig>) -> Result<Self> {
        let dressed = dress_grid(&setup.floop, &setup.pair, grid, flows)?;
        if !dressed.holes.is_empty() {
            return Ok(Self { dressed, v: None, extraction_error: Some("grid has non-factorizable nodes".into()) });
        }
        match extract_solution(&dressed, &setup.pair) {
            Ok(mut v) => {
                if let Some(t) = tamper {
                    let dir = setup
                        .pair
                        .u1_perp_a()
                        .basis()
                        .first()
                        .cloned()
                        .ok_or_else(|| anyhow!("𝒰₁ ∩ 𝒜⊥ is trivial; nothing to tamper with"))?;
                    let k = nearest_node(grid, &t.point);
                    v.values[k] += dir * Complex64::new(t.amount, 0.0);
                }
                Ok(Self { dressed, v: Some(v), extraction_error: None })
            }
            Err(e) => Ok(Self { dressed, v: None, extraction_error: Some(e.to_string()) }),
        }
    }

    pub fn complete(&self) -> bool {
        self.dressed.holes.is_empty()
    }

    fn v(&self) -> Result<&GridField> {
        self.v.as_ref().ok_or_else(|| anyhow!(self.extraction_error.clone().unwrap_or_default()))
    }
}

/// Hole count, conditioning and the per-node identities of the factorization.
pub fn factorization_checks(setup: &Setup, level: &Level) -> Vec<Check> {
    let d = &level.dressed;
    let g = &d.grid;
    let mut out = Vec::new();
    let holes = &d.holes;
    let mut complete = Check::flag(
        "factorization.complete",
        holes.is_empty(),
        if holes.is_empty() {
            String::new()
        } else {
            format!("{} of {} nodes are not factorizable", holes.len(), g.len())
        },
    );
    if let Some(&h) = holes.first() {
        complete = complete.at(g.point(h));
        complete.value = holes.len() as f64;
    }
    out.push(complete);
    let conds: Vec<f64> = d.points.iter().map(|p| p.as_ref().map_or(0.0, |p| p.cond)).collect();
    let (cmax, cnode) = lax::argmax(&conds);
    out.push(Check::at_most("factorization.condition", cmax, COND_LIMIT).at(g.point(cnode)));
    let checks = d.check_all(&setup.pair, &setup.lambdas);
    let column = |f: &dyn Fn(&curvedflat::dressing::PointChecks) -> f64| -> Vec<f64> {
        checks.iter().map(|c| c.as_ref().map_or(0.0, f)).collect()
    };
    let tol = setup.tol.exact;
    for (name, vals) in [
        ("factorization.product_identity", column(&|c| c.product_identity)),
        ("factorization.entirety", column(&|c| c.entirety)),
        ("factorization.reality", column(&|c| c.reality)),
        ("factorization.m_at_infinity", column(&|c| c.m_at_infinity)),
    ] {
        let (m, k) = lax::argmax(&vals);
        out.push(Check::at_most(name, m, tol).at(g.point(k)));
    }
    out.push(Check::at_most(
        "factorization.loop_reality",
        loop_reality_residual(&setup.floop, &setup.pair, &setup.lambdas),
        tol,
    ));
    out
}

/// Membership of `v` and its size: zero for the vacuum, clearly nonzero otherwise.
pub fn solution_checks(setup: &Setup, level: &Level) -> Vec<Check> {
    let v = match level.v() {
        Ok(v) => v,
        Err(e) => return vec![Check::flag("solution.extracted", false, e.to_string())],
    };
    let mut out = vec![Check::flag("solution.extracted", true, "")];
    let (res, node) = v.membership_residual(&setup.pair);
    out.push(Check::at_most("solution.membership", res, lax::TOL_SPACE).at(v.grid.point(node)));
    let norms = lax::node_norms(&v.values);
    let (m, k) = lax::argmax(&norms);
    let check = if setup.is_vacuum() {
        Check::at_most("solution.vacuum_zero", m, setup.tol.exact)
    } else {
        Check::at_least("solution.nonzero", m, 1e-6)
    };
    out.push(check.at(v.grid.point(k)));
    out
}

/// `uu0_residual` on the coarse grid, with its convergence when a fine level is given.
pub fn uu0_checks(setup: &Setup, coarse: &Level, fine: Option<&Level>) -> Result<Vec<Check>> {
    let cv = coarse.v()?;
    let cr = uu0_residual(cv, &setup.pair)?.node_norms();
    let fr = match fine {
        Some(f) => Some(uu0_residual(f.v()?, &setup.pair)?.node_norms()),
        None => None,
    };
    let fine_pair = fine.zip(fr.as_deref()).map(|(f, r)| (&f.dressed.grid, r));
    Ok(vec![setup.field_check("lax.uu0_residual", (&cv.grid, &cr), fine_pair, &all, setup.tol.residual)?])
}

pub struct Geometry {
    pub psi: CurvedFlat,
    pub lift: CartanLift,
    pub flat: FlatAbelian,
}

pub fn geometry(setup: &Setup, level: &Level, delta: f64) -> Result<Geometry> {
    let v = level.v()?;
    Ok(Geometry {
        psi: curved_flat(&level.dressed, &setup.pair)?,
        lift: cartan_lift(&level.dressed, v, &setup.pair)?,
        flat: flat_abelian(&level.dressed, &setup.pair, delta)?,
    })
}

pub fn geometry_checks(setup: &Setup, coarse: &Geometry, fine: Option<&Geometry>, delta: f64) -> Vec<Check> {
    let mut out = Vec::new();
    let sigma = fine.map_or(coarse.psi.sigma_residual, |f| f.psi.sigma_residual.max(coarse.psi.sigma_residual));
    out.push(Check::at_most("geometry.curved_flat_sigma", sigma, setup.tol.sigma));
    out.push(Check::at_most("geometry.curved_flat_base", coarse.psi.base_residual, setup.tol.exact));
    let lift = |g: &Geometry| {
        [g.lift.u1_residual, g.lift.bracket_residual, g.lift.conjugation_residual, g.lift.g_equation_residual]
    };
    let names = ["geometry.lift_u1", "geometry.lift_bracket", "geometry.lift_conjugation", "geometry.lift_g_equation"];
    let cl = lift(coarse);
    let fl = fine.map(lift);
    for (q, name) in names.iter().enumerate() {
        let mut c = setup.maxima_check(name, cl[q], fl.map(|f| f[q]), setup.tol.residual);
        let (_, node) = lax::argmax(&coarse.lift.node_residuals);
        c = c.at(coarse.lift.f.grid.point(node));
        out.push(c);
    }
    // truncation of the λ difference is O(δ⁴); below it no grid order is visible
    let d4 = delta.powi(4);
    out.push(Check::at_most("geometry.flat_u1", coarse.flat.u1_residual.max(fine.map_or(0.0, |f| f.flat.u1_residual)), d4));
    let flat = |g: &Geometry| [g.flat.bracket_residual, g.flat.derivative_residual, g.flat.gram_drift];
    let names = ["geometry.flat_bracket", "geometry.flat_derivative", "geometry.flat_gram"];
    let cf = flat(coarse);
    let ff = fine.map(flat);
    for (q, name) in names.iter().enumerate() {
        let mut c = setup.maxima_check(name, cf[q], ff.map(|f| f[q]), setup.tol.residual);
        if !c.passed && c.value <= d4 {
            c.passed = true;
            c.detail = format!("below the λ-difference floor δ⁴ = {d4:.1e}");
        }
        out.push(c);
    }
    out
}

/// With `f = I`: `E(x, λ) = exp(λ Σ a_i x_i)`, `ψ = exp(2 Σ a_i x_i)` and `Y = Σ a_i x_i`.
pub fn vacuum_checks(setup: &Setup, level: &Level, geo: &Geometry, bound: f64) -> Result<Vec<Check>> {
    use curvedflat::lax::FrameProvider;
    let g = &level.dressed.grid;
    let a = setup.pair.a();
    let ax: Vec<Mat> = (0..g.len())
        .map(|k| {
            let mut m = linalg::zeros(setup.pair.n());
            for (ai, xi) in a.iter().zip(g.point(k)) {
                m += ai * Complex64::new(xi, 0.0);
            }
            m
        })
        .collect();
    let worst = |vals: &[Mat], exact: &dyn Fn(usize) -> Mat| -> (f64, usize) {
        let errs: Vec<f64> = vals.iter().enumerate().map(|(k, m)| linalg::dist(m, &exact(k))).collect();
        lax::argmax(&errs)
    };
    let mut frame_err = (0.0f64, 0usize);
    for &lam in &setup.lambdas {
        let e = level.dressed.frame(lam)?;
        let w = worst(&e, &|k| linalg::expm(&(&ax[k] * lam)));
        if w.0 > frame_err.0 || w.0.is_nan() {
            frame_err = w;
        }
    }
    let psi = worst(&geo.psi.psi.values, &|k| linalg::expm(&(&ax[k] * Complex64::new(2.0, 0.0))));
    let y = worst(&geo.flat.y.values, &|k| ax[k].clone());
    Ok(vec![
        Check::at_most("vacuum.frame_closed_form", frame_err.0, bound).at(g.point(frame_err.1)),
        Check::at_most("vacuum.psi_closed_form", psi.0, bound).at(g.point(psi.1)),
        Check::at_most("vacuum.y_closed_form", y.0, bound).at(g.point(y.1)),
    ])
}

/// The `Q` suite for `c = a₁`: recursion, closedness, parity, generation from `v` and the
/// vanishing coefficients of `[Q_{a₁}, Q_{a₂}]`.
pub fn q_checks(setup: &Setup, coarse: &Level, fine: Option<&Level>, depth: usize, coefficient_depth: usize) -> Result<Vec<Check>> {
    let pair = &setup.pair;
    let c = pair.a()[0].clone();
    fn seq<'a>(l: &'a Level, c: &Mat, depth: usize) -> Result<(QSequence, &'a GridField)> {
        Ok((QSequence::expand(&l.dressed, c, depth + 1)?, l.v()?))
    }
    let seq = |l| seq(l, &c, depth);
    let (cq, cv) = seq(coarse)?;
    let fq = fine.map(seq).transpose()?;
    let cg = &cq.grid;
    let mut out = Vec::new();
    let exact = setup.tol.exact;
    let fd = setup.tol.residual;

    let crec = q_recursion_residual(cv, &cq, pair)?;
    let frec = fq.as_ref().map(|(q, v)| q_recursion_residual(v, q, pair)).transpose()?;
    for n in 0..=depth {
        let fine_field = fq.as_ref().zip(frec.as_ref()).map(|((q, _), r)| (&q.grid, r.per_level[n].as_slice()));
        out.push(setup.field_check(&format!("q.recursion.level_{n}"), (cg, &crec.per_level[n]), fine_field, &all, fd)?);
    }
    for n in 1..=depth {
        let cc = closedness_residual(&cq, n, pair)?;
        let fc = fq.as_ref().map(|(q, _)| closedness_residual(q, n, pair)).transpose()?;
        let fine_field = fq.as_ref().zip(fc.as_ref()).map(|((q, _), r)| (&q.grid, r.as_slice()));
        out.push(setup.field_check(&format!("q.closedness.level_{n}"), (cg, &cc), fine_field, &all, fd)?);
    }
    let parity = fq.as_ref().map_or(0.0, |(q, _)| q.parity_residual(pair)).max(cq.parity_residual(pair));
    out.push(Check::at_most("q.parity", parity, exact));

    let agreement = |q: &QSequence, v: &GridField, closure: KernelClosure| -> Result<Vec<Vec<f64>>> {
        let gen = q_generate(v, &c, depth, pair, closure)?;
        Ok((0..=depth)
            .map(|n| {
                q.levels[n].par_iter().zip(&gen.q.levels[n]).map(|(a, b)| linalg::dist(a, b)).collect()
            })
            .collect())
    };
    let cagree = agreement(&cq, cv, KernelClosure::Invariants)?;
    let fagree = fq.as_ref().map(|(q, v)| agreement(q, v, KernelClosure::Invariants)).transpose()?;
    let cedge = agreement(&cq, cv, KernelClosure::EdgeIntegration(None))?;
    let fedge = fq.as_ref().map(|(q, v)| agreement(q, v, KernelClosure::EdgeIntegration(None))).transpose()?;
    for n in 1..=depth {
        let keep = away_from_edges(cg, 0, 2 * n);
        let fine_field = fq.as_ref().zip(fagree.as_ref()).map(|((q, _), a)| (&q.grid, a[n].as_slice()));
        let mut check = setup.field_check(&format!("q.generate.level_{n}"), (cg, &cagree[n]), fine_field, &keep, fd)?;
        let edge_fine = fq.as_ref().zip(fedge.as_ref()).map(|((q, _), a)| (&q.grid, a[n].as_slice()));
        let edge = setup.field_check("edge", (cg, &cedge[n]), edge_fine, &keep, fd)?;
        check.detail = match edge.convergence.and_then(|s| s.ratio) {
            Some(r) => format!("invariant closure; edge-integration closure: {:.3e} (ratio {r:.2})", edge.value),
            None => format!("invariant closure; edge-integration closure: {:.3e}", edge.value),
        };
        out.push(check);
    }

    let c2 = pair.a().get(1).unwrap_or(&pair.a()[0]).clone();
    let coeff: Vec<f64> = (0..cg.len())
        .into_par_iter()
        .map(|k| {
            let p = coarse.dressed.point(k).map_err(|e| anyhow!(e))?;
            Ok(commuting_expansion_residual(p, &c, &c2, coefficient_depth)?)
        })
        .collect::<Result<_>>()?;
    let (m, k) = lax::argmax(&coeff);
    out.push(Check::at_most("q.commuting_coefficients", m, exact).at(cg.point(k)));
    Ok(out)
}

pub struct FlowSetup {
    pub b_index: usize,
    pub j: u32,
    pub t_range: (f64, f64),
    pub samples: usize,
    pub density_level: usize,
    pub second: FlowTerm,
}

impl FlowSetup {
    pub fn from_config(cfg: &RunConfig, pair: &SymmetricPair) -> Option<Self> {
        let f = cfg.flow.as_ref()?;
        let second = match &f.commute_with {
            Some(s) => FlowTerm { b: pair.a()[s.b_index].clone(), j: s.j, t: s.t },
            None => FlowTerm { b: pair.a()[1.min(pair.rank() - 1)].clone(), j: 5, t: -0.03 },
        };
        Some(Self {
            b_index: f.b_index,
            j: f.j,
            t_range: (f.t_range[0], f.t_range[1]),
            samples: f.samples,
            density_level: f.density_level,
            second,
        })
    }

    pub fn family(&self, setup: &Setup, grid: &Grid, samples: usize) -> Result<FlowFamily> {
        let b = &setup.pair.a()[self.b_index];
        Ok(FlowFamily::build(&setup.floop, &setup.pair, grid, b, self.j, self.t_range, samples)?)
    }
}

pub struct FlowOutcome {
    pub checks: Vec<Check>,
    pub conserved: ConservedReport,
    pub finest: FlowFamily,
}

/// Flow residual, flux identities, the conserved integral and commuting flows. With
/// convergence on, the grid and the time step are halved together.
pub fn flow_checks(setup: &Setup, fs: &FlowSetup, grid: &Grid) -> Result<FlowOutcome> {
    let pair = &setup.pair;
    let coarse = fs.family(setup, grid, fs.samples)?;
    let fine = if setup.convergence { Some(fs.family(setup, &grid.refined(), 2 * fs.samples - 1)?) } else { None };
    let fd = setup.tol.residual;
    let mut out = Vec::new();

    let cf = flow_residual(&coarse, pair)?;
    let ff = fine.as_ref().map(|f| flow_residual(f, pair)).transpose()?;
    out.push(setup.maxima_check("flows.flow_residual", cf.max, ff.as_ref().map(|r| r.max), fd));

    let c = &pair.a()[fs.b_index];
    let n = fs.density_level;
    for i in 0..grid.r() {
        let cr = flux_identity_residual(&coarse, c, n, i, pair)?;
        let fr = fine.as_ref().map(|f| flux_identity_residual(f, c, n, i, pair)).transpose()?;
        out.push(setup.maxima_check(&format!("flows.flux_identity.n{n}.i{}", i + 1), cr.max, fr.map(|r| r.max), fd));
    }
    // odd-level densities vanish by parity, so both sides of the identity are round-off
    if n % 2 == 0 && n >= 2 {
        let odd = n - 1;
        let r = flux_identity_residual(&coarse, c, odd, 0, pair)?;
        out.push(Check::at_most(format!("flows.flux_identity.n{odd}.i1"), r.max, setup.tol.floor));
    }

    let finest = fine.unwrap_or(coarse);
    let conserved = conserved_quantity(&finest, c, n, 0, pair)?;
    let h = finest.grid().h(0).max(finest.grid().h(finest.grid().r() - 1));
    let allowance = setup.tol.drift_constant * (h.powi(4) + finest.h_t.powi(4));
    let bound = conserved.relative_flux_bound + allowance;
    out.push(
        Check::at_most(format!("flows.conserved.n{n}.relative_drift"), conserved.relative_drift, bound).with_detail(format!(
            "flux bound {:.3e} + C(h⁴ + h_t⁴) = {allowance:.3e}",
            conserved.relative_flux_bound
        )),
    );
    out.push(Check::at_most(format!("flows.conserved.n{n}.relative_balance"), conserved.relative_balance, setup.tol.balance));

    let first = FlowTerm { b: c.clone(), j: fs.j, t: fs.t_range.1 };
    let comm = commuting_flows_residual(&setup.floop, pair, grid, &first, &fs.second)?;
    out.push(Check::at_most("flows.commuting", comm, setup.tol.exact));
    Ok(FlowOutcome { checks: out, conserved, finest })
}

pub fn eds_checks(pair: &SymmetricPair, opts: &ProbeOptions) -> Result<(Vec<Check>, InvolutivitySummary)> {
    let s = involutivity_report(pair, opts)?;
    let r = &s.report;
    let chars: Vec<String> = r.characters.iter().map(|c| c.to_string()).collect();
    let chars = format!("s = ({})", chars.join(", "));
    let out = vec![
        Check::flag("eds.character_formula", s.character_formula_holds, chars.clone()),
        Check::flag("eds.tail_characters_vanish", s.tail_characters_vanish, chars),
        Check::flag("eds.character_sum", s.character_sum_holds, ""),
        Check::flag("eds.polar_monotone", r.polar_monotone, ""),
        Check {
            value: (r.codimension as f64 - r.c_flag as f64).abs(),
            ..Check::flag(
                "eds.cartan_equality",
                r.regular_flag,
                format!("codim = {}, c(F) = {}", r.codimension, r.c_flag),
            )
        },
        Check::flag("eds.regularity_probes", r.probes.iter().all(|p| p.regular), ""),
        Check::flag("eds.involutive", r.involutive, ""),
    ];
    Ok((out, s))
}

/// Values on a level for export.
pub fn level_fields(level: &Level, geo: &Geometry) -> Vec<(&'static str, Vec<Mat>)> {
    let mut out = Vec::new();
    if let Some(v) = &level.v {
        out.push(("v", v.values.clone()));
    }
    out.push(("psi", geo.psi.psi.values.clone()));
    out.push(("f", geo.lift.f.values.clone()));
    out.push(("g", geo.lift.g.values.clone()));
    out.push(("y", geo.flat.y.values.clone()));
    out
}
