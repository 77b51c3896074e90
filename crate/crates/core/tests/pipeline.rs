//! Small end-to-end runs of the studies on a 16x16 dataset.

mod common;

use std::fs;

use aquiflow::experiments::{
    collect_rows, experiment_sampler, row_slug, run_ablation, run_table1, run_table1_row,
    run_uncertainty, ExperimentConfig, Study,
};
use aquiflow::fgrd::FgrdData;
use aquiflow::fields::apply_mask;
use aquiflow::metrics::{read_report, InputConfig};
use aquiflow::sampler::{sample, GuidanceTerms, SamplerConfig};

fn study(dir: &std::path::Path) -> Study {
    let (manifest, checkpoint) = common::tiny_pipeline(dir);
    Study::open(ExperimentConfig {
        manifest,
        checkpoint,
        cases: 1,
        seeds: vec![0],
        ensemble_count: 3,
        sampler: SamplerConfig {
            n_steps: 8,
            ..SamplerConfig::default()
        },
        output_dir: dir.join("runs"),
        ..ExperimentConfig::default()
    })
    .unwrap()
}

#[test]
fn table_has_five_rows_with_dash_cells() {
    let tmp = tempfile::tempdir().unwrap();
    let study = study(tmp.path());
    let out = run_table1(&study).unwrap();
    assert_eq!(out.rows.len(), 5);
    assert_eq!(out.checks.len(), 8);

    let table = tmp.path().join("runs/table1");
    let rows = read_report(&table.join("table1.csv")).unwrap();
    assert_eq!(
        rows.iter().map(|r| r.config).collect::<Vec<_>>(),
        InputConfig::ALL.to_vec()
    );
    let two = &rows[0];
    assert!(
        two.k_rmse.is_some()
            && two.s_rmse.is_some()
            && two.k_ssim.is_some()
            && two.s_ssim.is_some()
    );
    for r in &rows[1..3] {
        assert!(r.k_rmse.is_none() && r.k_ssim.is_none() && r.s_rmse.is_some());
    }
    for r in &rows[3..5] {
        assert!(r.s_rmse.is_none() && r.s_ssim.is_none() && r.k_rmse.is_some());
    }
    let by_case = fs::read_to_string(table.join("table1_by_case.csv")).unwrap();
    assert_eq!(by_case.lines().count(), 6);
    assert!(table.join("two-wells/case0_seed0.fgrd").exists());
    assert_eq!(collect_rows(&table).unwrap(), out.rows);
}

#[test]
fn a_row_rerun_in_isolation_is_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let study = study(tmp.path());
    run_table1(&study).unwrap();
    let dir = tmp
        .path()
        .join("runs/table1")
        .join(row_slug(InputConfig::FullS));
    let before = fs::read(dir.join("row.json")).unwrap();
    let field = fs::read(dir.join("case0_seed0.fgrd")).unwrap();
    fs::remove_dir_all(&dir).unwrap();
    run_table1_row(&study, InputConfig::FullS, &dir).unwrap();
    assert_eq!(fs::read(dir.join("row.json")).unwrap(), before);
    assert_eq!(fs::read(dir.join("case0_seed0.fgrd")).unwrap(), field);
}

#[test]
fn uncertainty_and_ablation_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let study = study(tmp.path());
    let (stats, summary, checks) = run_uncertainty(&study).unwrap();
    assert_eq!(stats.samples.len(), 3);
    assert_eq!(summary.count, 3);
    assert_eq!(checks.len(), 4);
    let maps = FgrdData::read(tmp.path().join("runs/uncertainty/ensemble_k.fgrd")).unwrap();
    assert_eq!(maps.channels.len(), 3);

    let (points, checks) = run_ablation(&study).unwrap();
    assert_eq!(points.len(), 4);
    assert_eq!(checks.len(), 6);
    let csv = fs::read_to_string(tmp.path().join("runs/ablation/ablation.csv")).unwrap();
    assert_eq!(
        csv.lines().next().unwrap(),
        "alpha,K_rMSE,S_rMSE,K_SSIM,S_SSIM"
    );
    assert_eq!(csv.lines().count(), 5);
}

#[test]
fn well_guidance_pulls_samples_toward_the_logs() {
    let tmp = tempfile::tempdir().unwrap();
    let study = study(tmp.path());
    let truth = &study.cases[0];
    let config = SamplerConfig {
        n_steps: 20,
        seed: 1,
        ..experiment_sampler()
    };
    let guided_terms = study.terms(InputConfig::TwoWells, truth, None).unwrap();
    let free = sample(&study.checkpoint.model, &GuidanceTerms::none(), &config).unwrap();
    let guided = sample(&study.checkpoint.model, &guided_terms, &config).unwrap();
    let misfit = |x: &aquiflow::fields::JointState| guided_terms.obs.as_ref().unwrap().loss(x);
    assert!(
        misfit(&guided) < 0.5 * misfit(&free),
        "{} vs {}",
        misfit(&guided),
        misfit(&free)
    );
    let obs = apply_mask(truth, &study.mask).unwrap();
    assert_eq!(obs.k_obs.len(), 2 * 16);
}
