//! Nuisance regressions: outcome models Q and propensity models pi, plus a
//! small cross-validated stacking ensemble.

mod ensemble;
mod linear;
mod logistic;

pub use ensemble::EnsembleMember;

use nalgebra::{DMatrix, DVector};

use crate::data::TargetSample;
use crate::error::{CcdsError, Result};
use crate::math::fnv1a;

/// Default floor for probabilities entering weight denominators.
pub const DEFAULT_TRIM_FLOOR: f64 = 1e-3;

/// Clamp a probability (or probability product) to [floor, 1 - floor].
pub fn trim_probability(p: f64, floor: f64) -> f64 {
    debug_assert!(floor > 0.0 && floor < 0.5);
    p.clamp(floor, 1.0 - floor)
}

/// One multiplicative factor of a basis term.
#[derive(Debug, Clone, PartialEq)]
pub enum Factor {
    /// Covariate x_j by zero-based index.
    Cov(usize),
    /// (x_j + shift)^exp
    Pow { cov: usize, shift: f64, exp: i32 },
    /// Indicator that the unit's treatment equals the named level.
    Arm(String),
    /// Indicator x_j < cut.
    Below { cov: usize, cut: f64 },
    /// Indicator x_j > cut.
    Above { cov: usize, cut: f64 },
}

/// Product of factors; a custom design is a list of these plus an intercept.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisTerm {
    pub factors: Vec<Factor>,
}

impl BasisTerm {
    pub fn new(factors: Vec<Factor>) -> Self {
        BasisTerm { factors }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegressionKind {
    MainTerms,
    InteractionsQuadratic,
    CustomDesign,
    Ensemble,
}

/// Declarative regression-form choice shared by outcome and propensity fits.
#[derive(Debug, Clone)]
pub struct RegressionSpec {
    pub kind: RegressionKind,
    /// Basis for `CustomDesign` (intercept implied).
    pub design: Vec<BasisTerm>,
    pub ridge_penalty: f64,
    pub ensemble_members: Vec<EnsembleMember>,
    pub ensemble_folds: usize,
    pub fold_seed: u64,
}

impl RegressionSpec {
    pub fn main_terms() -> Self {
        RegressionSpec {
            kind: RegressionKind::MainTerms,
            design: vec![],
            ridge_penalty: 0.0,
            ensemble_members: vec![],
            ensemble_folds: 5,
            fold_seed: 0,
        }
    }

    pub fn interactions_quadratic() -> Self {
        RegressionSpec {
            kind: RegressionKind::InteractionsQuadratic,
            ..Self::main_terms()
        }
    }

    pub fn custom(design: Vec<BasisTerm>) -> Self {
        RegressionSpec {
            kind: RegressionKind::CustomDesign,
            design,
            ..Self::main_terms()
        }
    }

    pub fn with_ridge(mut self, penalty: f64) -> Self {
        self.ridge_penalty = penalty;
        self
    }

    pub fn ensemble(members: Vec<EnsembleMember>) -> Self {
        RegressionSpec {
            kind: RegressionKind::Ensemble,
            ensemble_members: members,
            ..Self::main_terms()
        }
    }

    /// Stacking ensemble with the default member set: main-terms,
    /// interactions+quadratic, ridge over a small penalty grid, and kNN.
    pub fn default_ensemble() -> Self {
        Self::ensemble(vec![
            EnsembleMember::Spec(Self::main_terms()),
            EnsembleMember::Spec(Self::interactions_quadratic()),
            EnsembleMember::RidgeCv {
                base: Box::new(Self::main_terms()),
                penalty_grid: vec![0.01, 0.1, 1.0],
            },
            EnsembleMember::Knn,
        ])
    }

    pub fn with_fold_seed(mut self, seed: u64) -> Self {
        self.fold_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            RegressionKind::CustomDesign if self.design.is_empty() => Err(
                CcdsError::InvalidConfig("custom design needs at least one basis function".into()),
            ),
            RegressionKind::Ensemble if self.ensemble_members.len() < 2 => Err(
                CcdsError::InvalidConfig("ensemble needs at least two members".into()),
            ),
            RegressionKind::Ensemble if self.ensemble_folds < 2 => Err(
                CcdsError::InvalidConfig("ensemble_folds must be at least 2".into()),
            ),
            _ if self.ridge_penalty < 0.0 => Err(CcdsError::InvalidConfig(
                "ridge_penalty must be nonnegative".into(),
            )),
            _ => Ok(()),
        }
    }

    /// Stable content hash used as a nuisance fingerprint.
    pub fn fingerprint(&self) -> u64 {
        fnv1a(format!("{self:?}").as_bytes())
    }
}

/// Resolved design: maps (arm, x) rows to numeric columns.
#[derive(Debug, Clone)]
pub struct Design {
    cols: Vec<DesignCol>,
    /// Number of treatment levels when arm terms are allowed, else 0.
    n_levels: usize,
}

#[derive(Debug, Clone)]
enum DesignCol {
    Intercept,
    ArmIs(usize),
    Cov(usize),
    CovSquared(usize),
    ArmCov(usize, usize),
    Term(Vec<ResolvedFactor>),
}

#[derive(Debug, Clone)]
enum ResolvedFactor {
    Cov(usize),
    Pow { cov: usize, shift: f64, exp: i32 },
    ArmIs(usize),
    Below { cov: usize, cut: f64 },
    Above { cov: usize, cut: f64 },
}

impl Design {
    /// Resolves a spec against the sample's levels and covariate dimension.
    /// With `with_arms` false, arm factors are rejected (covariate-only fit).
    pub fn resolve(spec: &RegressionSpec, sample: &TargetSample, with_arms: bool) -> Result<Design> {
        let d = sample.dim();
        let k = sample.treatment_levels().len();
        let mut cols = vec![DesignCol::Intercept];
        match spec.kind {
            RegressionKind::MainTerms => {
                if with_arms {
                    cols.extend((1..k).map(DesignCol::ArmIs));
                }
                cols.extend((0..d).map(DesignCol::Cov));
            }
            RegressionKind::InteractionsQuadratic => {
                if with_arms {
                    cols.extend((1..k).map(DesignCol::ArmIs));
                }
                cols.extend((0..d).map(DesignCol::Cov));
                if with_arms {
                    for arm in 1..k {
                        cols.extend((0..d).map(|j| DesignCol::ArmCov(arm, j)));
                    }
                }
                cols.extend((0..d).map(DesignCol::CovSquared));
            }
            RegressionKind::CustomDesign => {
                for term in &spec.design {
                    let mut resolved = Vec::with_capacity(term.factors.len());
                    for f in &term.factors {
                        resolved.push(match f {
                            Factor::Cov(j) => {
                                check_cov(*j, d)?;
                                ResolvedFactor::Cov(*j)
                            }
                            Factor::Pow { cov, shift, exp } => {
                                check_cov(*cov, d)?;
                                ResolvedFactor::Pow {
                                    cov: *cov,
                                    shift: *shift,
                                    exp: *exp,
                                }
                            }
                            Factor::Below { cov, cut } => {
                                check_cov(*cov, d)?;
                                ResolvedFactor::Below { cov: *cov, cut: *cut }
                            }
                            Factor::Above { cov, cut } => {
                                check_cov(*cov, d)?;
                                ResolvedFactor::Above { cov: *cov, cut: *cut }
                            }
                            Factor::Arm(label) => {
                                if !with_arms {
                                    return Err(CcdsError::InvalidConfig(format!(
                                        "arm factor a:{label} not allowed in a covariate-only design"
                                    )));
                                }
                                let idx = sample.level_index(label).ok_or_else(|| {
                                    CcdsError::InvalidConfig(format!(
                                        "unknown treatment level {label:?} in custom design"
                                    ))
                                })?;
                                ResolvedFactor::ArmIs(idx)
                            }
                        });
                    }
                    cols.push(DesignCol::Term(resolved));
                }
            }
            RegressionKind::Ensemble => {
                return Err(CcdsError::InvalidConfig(
                    "ensemble spec has no single design".into(),
                ))
            }
        }
        Ok(Design {
            cols,
            n_levels: if with_arms { k } else { 0 },
        })
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn fill_row(&self, arm: usize, x: &[f64], out: &mut [f64]) {
        for (c, col) in self.cols.iter().enumerate() {
            out[c] = match col {
                DesignCol::Intercept => 1.0,
                DesignCol::ArmIs(k) => (arm == *k) as u8 as f64,
                DesignCol::Cov(j) => x[*j],
                DesignCol::CovSquared(j) => x[*j] * x[*j],
                DesignCol::ArmCov(k, j) => (arm == *k) as u8 as f64 * x[*j],
                DesignCol::Term(factors) => factors.iter().fold(1.0, |acc, f| {
                    acc * match f {
                        ResolvedFactor::Cov(j) => x[*j],
                        ResolvedFactor::Pow { cov, shift, exp } => (x[*cov] + shift).powi(*exp),
                        ResolvedFactor::ArmIs(k) => (arm == *k) as u8 as f64,
                        ResolvedFactor::Below { cov, cut } => (x[*cov] < *cut) as u8 as f64,
                        ResolvedFactor::Above { cov, cut } => (x[*cov] > *cut) as u8 as f64,
                    }
                }),
            };
        }
    }

    /// Builds the stacked matrix for the given unit indices.
    pub fn matrix(&self, sample: &TargetSample, idx: &[usize]) -> DMatrix<f64> {
        let p = self.ncols();
        let mut m = DMatrix::zeros(idx.len(), p);
        let mut row = vec![0.0; p];
        for (r, &i) in idx.iter().enumerate() {
            let u = sample.unit(i);
            self.fill_row(u.arm, &u.x, &mut row);
            for c in 0..p {
                m[(r, c)] = row[c];
            }
        }
        m
    }

    pub fn row_vector(&self, arm: usize, x: &[f64]) -> DVector<f64> {
        let mut out = vec![0.0; self.ncols()];
        self.fill_row(arm, x, &mut out);
        DVector::from_vec(out)
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }
}

fn check_cov(j: usize, d: usize) -> Result<()> {
    if j >= d {
        return Err(CcdsError::InvalidConfig(format!(
            "covariate index {} out of range (sample has {d} covariates)",
            j + 1
        )));
    }
    Ok(())
}

/// Fitted outcome regressor: deterministic prediction over (arm, x).
#[derive(Debug, Clone)]
pub struct FittedRegressor {
    pub(crate) model: RegressorModel,
    /// Weighted residual sum of squares on the fitting subset.
    pub rss: f64,
    pub n_used: usize,
    pub spec_fingerprint: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub(crate) enum RegressorModel {
    Linear {
        design: Design,
        coef: DVector<f64>,
    },
    Knn(ensemble::KnnModel),
    Stacked {
        members: Vec<FittedRegressor>,
        weights: Vec<f64>,
        pub_cv_risk: f64,
        member_cv_risks: Vec<f64>,
    },
}

impl FittedRegressor {
    pub fn predict(&self, arm: usize, x: &[f64]) -> f64 {
        match &self.model {
            RegressorModel::Linear { design, coef } => {
                let mut row = vec![0.0; design.ncols()];
                design.fill_row(arm, x, &mut row);
                row.iter().zip(coef.iter()).map(|(r, c)| r * c).sum()
            }
            RegressorModel::Knn(m) => m.predict(arm, x),
            RegressorModel::Stacked {
                members, weights, ..
            } => members
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(m, &w)| w * m.predict(arm, x))
                .sum(),
        }
    }

    /// Linear coefficients (intercept first), if this is a single linear fit.
    pub fn coefficients(&self) -> Option<&[f64]> {
        match &self.model {
            RegressorModel::Linear { coef, .. } => Some(coef.as_slice()),
            _ => None,
        }
    }

    /// Stacking weights over members, if this is an ensemble fit.
    pub fn ensemble_weights(&self) -> Option<&[f64]> {
        match &self.model {
            RegressorModel::Stacked { weights, .. } => Some(weights),
            _ => None,
        }
    }

    /// Cross-validated risk of the stack and of each member.
    pub fn cv_risks(&self) -> Option<(f64, &[f64])> {
        match &self.model {
            RegressorModel::Stacked {
                pub_cv_risk,
                member_cv_risks,
                ..
            } => Some((*pub_cv_risk, member_cv_risks)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PropensityTarget {
    Selection,
    Treatment,
    OverlapMembership,
}

/// Fitted propensity model; predictions are trimmed at `trim_floor`.
#[derive(Debug, Clone)]
pub struct PropensityModel {
    pub target: PropensityTarget,
    pub(crate) inner: PropensityInner,
    pub trim_floor: f64,
    pub spec_fingerprint: u64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub(crate) enum PropensityInner {
    Binary {
        design: Design,
        coef: DVector<f64>,
    },
    Multinomial {
        design: Design,
        /// One coefficient column per non-reference level (levels 1..K).
        coef: DMatrix<f64>,
        n_levels: usize,
    },
    BinaryStacked {
        members: Vec<PropensityModel>,
        weights: Vec<f64>,
    },
}

impl PropensityModel {
    /// P(target = 1 | x) for binary targets, trimmed.
    pub fn predict_prob(&self, x: &[f64]) -> f64 {
        trim_probability(self.predict_prob_raw(x), self.trim_floor)
    }

    fn predict_prob_raw(&self, x: &[f64]) -> f64 {
        match &self.inner {
            PropensityInner::Binary { design, coef } => {
                let mut row = vec![0.0; design.ncols()];
                design.fill_row(0, x, &mut row);
                crate::math::expit(row.iter().zip(coef.iter()).map(|(r, c)| r * c).sum())
            }
            PropensityInner::BinaryStacked { members, weights } => members
                .iter()
                .zip(weights)
                .filter(|(_, &w)| w > 0.0)
                .map(|(m, &w)| w * m.predict_prob_raw(x))
                .sum(),
            PropensityInner::Multinomial { .. } => {
                panic!("predict_prob on a multinomial model; use predict_arm")
            }
        }
    }

    /// P(A = arm | x) for treatment targets: per-level trim, then renormalize.
    pub fn predict_arm(&self, arm: usize, x: &[f64]) -> f64 {
        match &self.inner {
            PropensityInner::Multinomial {
                design,
                coef,
                n_levels,
            } => {
                let mut row = vec![0.0; design.ncols()];
                design.fill_row(0, x, &mut row);
                let mut probs = Vec::with_capacity(*n_levels);
                let mut denom = 1.0;
                let mut etas = Vec::with_capacity(n_levels - 1);
                for k in 0..n_levels - 1 {
                    let eta: f64 = row
                        .iter()
                        .zip(coef.column(k).iter())
                        .map(|(r, c)| r * c)
                        .sum();
                    etas.push(eta);
                    denom += eta.exp();
                }
                probs.push(1.0 / denom);
                for eta in etas {
                    probs.push(eta.exp() / denom);
                }
                let trimmed: Vec<f64> = probs
                    .iter()
                    .map(|&p| trim_probability(p, self.trim_floor))
                    .collect();
                let total: f64 = trimmed.iter().sum();
                trimmed[arm] / total
            }
            _ => {
                // binary model used for a two-level treatment: level 1 is "success"
                let p1 = self.predict_prob(x);
                if arm == 1 {
                    p1
                } else {
                    1.0 - p1
                }
            }
        }
    }
}

/// Fits an outcome regression on the given unit subset.
pub fn fit_outcome_regression(
    sample: &TargetSample,
    idx: &[usize],
    spec: &RegressionSpec,
) -> Result<FittedRegressor> {
    spec.validate()?;
    if idx.is_empty() {
        return Err(CcdsError::EmptyStratum("outcome fit on empty subset".into()));
    }
    if spec.kind == RegressionKind::Ensemble {
        return ensemble::fit_stacked_outcome(sample, idx, spec);
    }
    let design = Design::resolve(spec, sample, true)?;
    linear::fit_weighted_ols(sample, idx, &design, spec)
}

/// Cross-validated stacking fit; requires `spec.kind == Ensemble`.
pub fn fit_ensemble(
    sample: &TargetSample,
    idx: &[usize],
    spec: &RegressionSpec,
) -> Result<FittedRegressor> {
    if spec.kind != RegressionKind::Ensemble {
        return Err(CcdsError::InvalidConfig("fit_ensemble needs an ensemble spec".into()));
    }
    fit_outcome_regression(sample, idx, spec)
}

/// Fits a binary logistic model of `labels` (aligned with `idx`) on covariates.
pub fn fit_binary_propensity(
    sample: &TargetSample,
    idx: &[usize],
    labels: &[bool],
    spec: &RegressionSpec,
    target: PropensityTarget,
) -> Result<PropensityModel> {
    spec.validate()?;
    assert_eq!(idx.len(), labels.len());
    if idx.is_empty() {
        return Err(CcdsError::EmptyStratum("propensity fit on empty subset".into()));
    }
    let ones = labels.iter().filter(|&&b| b).count();
    if ones == 0 || ones == labels.len() {
        return Err(CcdsError::SingleClass(format!(
            "{} of {} labels positive",
            ones,
            labels.len()
        )));
    }
    if spec.kind == RegressionKind::Ensemble {
        return ensemble::fit_stacked_binary(sample, idx, labels, spec, target);
    }
    let design = Design::resolve(spec, sample, false)?;
    logistic::fit_binary(sample, idx, labels, &design, spec, target)
}

/// Fits a multinomial (softmax, reference = first level) treatment model.
pub fn fit_treatment_propensity(
    sample: &TargetSample,
    idx: &[usize],
    spec: &RegressionSpec,
) -> Result<PropensityModel> {
    spec.validate()?;
    if idx.is_empty() {
        return Err(CcdsError::EmptyStratum("treatment fit on empty subset".into()));
    }
    let present = sample.levels_present(idx);
    for (k, level) in sample.treatment_levels().iter().enumerate() {
        if !present.contains(&k) {
            return Err(CcdsError::MissingLevel {
                stratum: "treatment propensity subset".into(),
                level: level.clone(),
            });
        }
    }
    if present.len() < 2 {
        return Err(CcdsError::SingleClass(
            "fewer than two treatment levels in subset".into(),
        ));
    }
    let design = Design::resolve(spec, sample, false)?;
    logistic::fit_multinomial(sample, idx, &design, spec)
}
