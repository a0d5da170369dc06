//! Runs a directory of configs and evaluates the cross-relations their
//! roles request.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use persist_lab::coeffspec::{rate3_profile, Family};
use persist_lab::persist::{relation_suite, ExponentFit, RelationInputs, RelationReport, RelationStatus};
use rayon::prelude::*;

use crate::commands::relations_table;
use crate::config::{Command, ExperimentConfig, HeatParams, PersistTarget};
use crate::error::CliError;
use crate::table::{json_bytes, Table};
use crate::{digest_dir, pool, resolve_workers, run_in_pool, write_tables, RunOptions, RunOutcome};

#[derive(Debug, Clone, PartialEq)]
pub struct MemberResult {
    pub id: String,
    pub code: i32,
    pub message: String,
}

#[derive(Debug)]
pub struct SweepReport {
    pub dir: PathBuf,
    pub members: Vec<MemberResult>,
    pub relations: Vec<RelationReport>,
    /// Fits produced by successful members, keyed by member id.
    pub fits: BTreeMap<String, ExponentFit>,
    pub exit_code: i32,
}

/// What a role contributes once its member has run.
#[derive(Debug, Clone, PartialEq)]
enum Role {
    R1Constant,
    R1Varying,
    R2(f64),
    Sum { relation: u8, part: SumPart },
    R5Process(f64),
    R5Poly(f64),
    R6(f64),
    R7(usize),
    Gauss8,
    R8,
    R9,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum SumPart {
    Combined,
    BAlpha,
    BZero,
}

impl Role {
    fn parse(s: &str) -> Result<Self, CliError> {
        let bad = || CliError::Config(format!("unknown role {s:?}"));
        let num = |v: &str| v.parse::<f64>().map_err(|_| bad());
        let parts: Vec<&str> = s.split(':').collect();
        Ok(match parts.as_slice() {
            ["r1", "constant"] => Role::R1Constant,
            ["r1", "varying"] => Role::R1Varying,
            ["r2", a] => Role::R2(num(a)?),
            [r @ ("r3" | "r4"), part] => Role::Sum {
                relation: if *r == "r3" { 3 } else { 4 },
                part: match *part {
                    "combined" => SumPart::Combined,
                    "b_alpha" => SumPart::BAlpha,
                    "b_zero" => SumPart::BZero,
                    _ => return Err(bad()),
                },
            },
            ["r5", "process", a] => Role::R5Process(num(a)?),
            ["r5", "poly", a] => Role::R5Poly(num(a)?),
            ["r6", a] => Role::R6(num(a)?),
            ["r7", n] => Role::R7(n.parse().map_err(|_| bad())?),
            ["gauss8"] => Role::Gauss8,
            ["r8"] => Role::R8,
            ["r9"] => Role::R9,
            _ => return Err(bad()),
        })
    }

    /// Relation ids this role asks to be evaluated.
    fn requests(&self) -> Option<&'static str> {
        match self {
            Role::R1Constant | Role::R1Varying => Some("R1"),
            Role::R2(_) => Some("R2"),
            Role::Sum { relation: 3, .. } => Some("R3"),
            Role::Sum { .. } => Some("R4"),
            Role::R5Process(_) | Role::R5Poly(_) => Some("R5"),
            Role::R6(_) => Some("R6"),
            Role::R7(_) => Some("R7"),
            Role::Gauss8 => None,
            Role::R8 => Some("R8"),
            Role::R9 => Some("R9"),
        }
    }

    fn needs_fit(&self) -> bool {
        !matches!(self, Role::R8 | Role::R9)
    }
}

fn produces_fit(cfg: &ExperimentConfig) -> Result<bool, CliError> {
    Ok(match cfg.parsed()? {
        Command::Persist(p) => p.fit.is_some() && !matches!(p.target, PersistTarget::Orthant { .. }),
        Command::Fit(_) => true,
        Command::Heat(h) => !matches!(h, HeatParams::Variance { .. }),
        _ => false,
    })
}

fn produces_estimates(cfg: &ExperimentConfig) -> Result<bool, CliError> {
    Ok(matches!(cfg.parsed()?, Command::Persist(_) | Command::Fit(_) | Command::Heat(_)))
}

/// The rate condition for the slowly varying part of a doubling-relation member.
fn rate_ok(cfg: &ExperimentConfig) -> Option<bool> {
    match cfg.parsed().ok()? {
        Command::Persist(p) => match p.target {
            PersistTarget::Polynomial { family: Family::RegVar { slowly_varying, .. }, degrees, .. } => {
                let n_max = degrees.iter().copied().max()? as u64;
                rate3_profile(&slowly_varying, n_max.max(2)).ok().map(|r| r.passes)
            }
            _ => None,
        },
        _ => None,
    }
}

fn apply(inp: &mut RelationInputs, role: &Role, fit: Option<&ExponentFit>, run: &RunOutcome) {
    let fit = fit.cloned();
    match role {
        Role::R1Constant => inp.r1_constant = fit,
        Role::R1Varying => inp.r1_varying = fit,
        Role::R2(a) => inp.r2.extend(fit.map(|f| (*a, f))),
        Role::Sum { relation, part } => {
            let target = if *relation == 3 { &mut inp.r3 } else { &mut inp.r4 };
            match part {
                SumPart::Combined => target.combined = fit,
                SumPart::BAlpha => target.b_alpha = fit,
                SumPart::BZero => target.b_zero = fit,
            }
        }
        Role::R5Process(a) | Role::R5Poly(a) => {
            let idx = match inp.r5.iter().position(|(x, _, _)| x == a) {
                Some(i) => i,
                None => {
                    inp.r5.push((*a, None, None));
                    inp.r5.len() - 1
                }
            };
            if matches!(role, Role::R5Process(_)) {
                inp.r5[idx].1 = fit;
            } else {
                inp.r5[idx].2 = fit;
            }
        }
        Role::R6(a) => inp.r6.extend(fit.map(|f| (*a, f))),
        Role::R7(n) => inp.r7.extend(fit.map(|f| (*n, f))),
        Role::Gauss8 => inp.gauss8 = fit,
        Role::R8 => inp.r8.extend(run.estimates.iter().cloned()),
        Role::R9 => inp.r9.extend(run.estimates.iter().cloned()),
    }
}

/// Member configs in `dir`, sorted by file name.
pub fn load_dir(dir: &Path) -> Result<Vec<ExperimentConfig>, CliError> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("{} holds no *.json configs", dir.display())));
    }
    let configs = paths.iter().map(|p| ExperimentConfig::load(p)).collect::<Result<Vec<_>, _>>()?;
    let mut seen = BTreeSet::new();
    for c in &configs {
        if !seen.insert(c.id.as_str()) {
            return Err(CliError::Config(format!("duplicate member id {:?}", c.id)));
        }
    }
    Ok(configs)
}

pub fn sweep(dir: &Path, opts: &RunOptions) -> Result<SweepReport, CliError> {
    let configs = load_dir(dir)?;
    let mut roles = Vec::with_capacity(configs.len());
    for c in &configs {
        let parsed = c.roles.iter().map(|r| Role::parse(r)).collect::<Result<Vec<_>, _>>()?;
        for r in &parsed {
            let ok = if r.needs_fit() { produces_fit(c)? } else { produces_estimates(c)? };
            if !ok {
                return Err(CliError::Config(format!("member {:?} cannot fill role {r:?}", c.id)));
            }
        }
        roles.push(parsed);
    }
    let name = dir
        .file_name()
        .and_then(|n| n.to_str())
        .filter(|n| !n.is_empty() && !n.starts_with('.'))
        .unwrap_or("sweep")
        .to_string();
    let workers = resolve_workers(opts.workers, None)?;
    let results: Vec<Result<RunOutcome, CliError>> =
        pool(workers)?.install(|| configs.par_iter().map(|c| run_in_pool(c, opts, workers)).collect());

    let mut inputs = RelationInputs::default();
    let mut requested = BTreeSet::new();
    let mut members = Vec::new();
    let mut fits = BTreeMap::new();
    for ((cfg, member_roles), result) in configs.iter().zip(&roles).zip(&results) {
        requested.extend(member_roles.iter().filter_map(Role::requests));
        match result {
            Ok(run) => {
                for role in member_roles {
                    apply(&mut inputs, role, run.fit.as_ref(), run);
                    if *role == (Role::Sum { relation: 4, part: SumPart::Combined }) {
                        inputs.r4_rate_ok = rate_ok(cfg);
                    }
                }
                fits.extend(run.fit.clone().map(|f| (cfg.id.clone(), f)));
                members.push(MemberResult { id: cfg.id.clone(), code: 0, message: String::new() });
            }
            Err(e) => {
                log::error!("member {} failed: {e}", cfg.id);
                members.push(MemberResult { id: cfg.id.clone(), code: e.exit_code(), message: e.to_string() });
            }
        }
    }
    inputs.r2.sort_by(|a, b| a.0.total_cmp(&b.0));
    inputs.r6.sort_by(|a, b| a.0.total_cmp(&b.0));
    inputs.r7.sort_by_key(|p| p.0);
    inputs.r5.sort_by(|a, b| a.0.total_cmp(&b.0));

    let relations: Vec<RelationReport> =
        relation_suite(&inputs).into_iter().filter(|r| requested.contains(r.id.as_str())).collect();
    let exit_code = exit_policy(&relations, &members);

    let root = opts.out.clone().unwrap_or_else(|| PathBuf::from("out"));
    let dest = root.join(format!("sweep-{name}"));
    let staging = root.join(format!(".sweep-{name}.partial"));
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    fs::create_dir_all(&staging)?;
    let mut member_table = Table::new("members", &["id", "exit_code", "message"]);
    for m in &members {
        member_table.push(vec![m.id.clone().into(), crate::table::Cell::Int(m.code.into()), m.message.clone().into()]);
    }
    write_tables(&staging, &[relations_table(&relations), member_table])?;
    let summary = SweepManifest {
        schema_version: crate::config::SCHEMA_VERSION,
        sweep: name,
        exit_code,
        members: configs.iter().map(|c| (c.id.clone(), c.hash())).collect(),
        files: digest_dir(&staging)?,
    };
    fs::write(staging.join("manifest.json"), json_bytes(&summary))?;
    if dest.exists() {
        fs::remove_dir_all(&dest)?;
    }
    fs::rename(&staging, &dest)?;
    Ok(SweepReport { dir: dest, members, relations, fits, exit_code })
}

#[derive(Debug, serde::Serialize)]
struct SweepManifest {
    schema_version: u32,
    sweep: String,
    exit_code: i32,
    members: BTreeMap<String, String>,
    files: Vec<crate::FileDigest>,
}

/// 5 if any relation failed; otherwise the first failing member's code;
/// otherwise 2 if a requested relation lacked inputs; otherwise 0.
pub fn exit_policy(relations: &[RelationReport], members: &[MemberResult]) -> i32 {
    if relations.iter().any(|r| r.status == RelationStatus::Fail) {
        5
    } else if let Some(m) = members.iter().find(|m| m.code != 0) {
        m.code
    } else if relations.iter().any(|r| r.status == RelationStatus::Skipped) {
        2
    } else {
        0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roles_parse() {
        assert_eq!(Role::parse("r2:-0.5").unwrap(), Role::R2(-0.5));
        assert_eq!(Role::parse("r4:b_zero").unwrap(), Role::Sum { relation: 4, part: SumPart::BZero });
        assert_eq!(Role::parse("r7:64").unwrap(), Role::R7(64));
        assert!(Role::parse("r3:other").is_err());
        assert!(Role::parse("r10").is_err());
    }

    #[test]
    fn policy_order() {
        let skipped = RelationReport::skipped("R1", "x");
        let ok = MemberResult { id: "a".into(), code: 0, message: String::new() };
        let bad = MemberResult { id: "b".into(), code: 3, message: "boom".into() };
        assert_eq!(exit_policy(&[], std::slice::from_ref(&ok)), 0);
        assert_eq!(exit_policy(std::slice::from_ref(&skipped), std::slice::from_ref(&ok)), 2);
        assert_eq!(exit_policy(&[skipped], &[ok, bad]), 3);
    }
}
