//! One function per subcommand. Every artifact lives in the output directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use attn_surgery::attention::FeatureMapPair;
use attn_surgery::distill::{
    build_error_table, checkpoint_name, load_feature_checkpoint, save_feature_checkpoint, ErrorTable,
};
use attn_surgery::numerics::SeededRng;
use attn_surgery::planner::{
    build_cost_table, flops_at_rate, homogeneous_select, standard_grid, reduction_report, solve_mckp, Budget, CostTable,
    RatePlan, ReductionReport,
};
use attn_surgery::toymodel::{
    assemble_student, evaluate_fidelity, finetune_student, generate_synthetic, teacher_labelled, train_teacher,
    FidelityReport, ToyModel, TrainConfig,
};
use attn_surgery::Error;
use serde_json::json;

use crate::config::{EvalModel, PipelineConfig, PlanMode, TeacherSource};
use crate::error::CliError;

pub const TEACHER_FILE: &str = "teacher.bin";
pub const ERRORS_FILE: &str = "errors.json";
pub const DISTILL_CSV: &str = "distill_report.csv";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const COSTS_FILE: &str = "costs.json";
pub const PLAN_FILE: &str = "plan.json";
pub const PLAN_CSV: &str = "plan_report.csv";
pub const STUDENT_FILE: &str = "student.bin";
pub const FINETUNE_CSV: &str = "finetune_metrics.csv";
pub const LOSSES_CSV: &str = "finetune_losses.csv";
pub const EVAL_CSV: &str = "eval_metrics.csv";
pub const FLOPS_RATES_CSV: &str = "flops_rates.csv";
pub const FLOPS_GRID_CSV: &str = "flops_grid.csv";

pub const DISTILL_HEADER: &str = "block,rate,initial_error,final_error,updates";
pub const FINETUNE_HEADER: &str = "stage,seed,output_l1,mean_block_l1";
pub const EVAL_HEADER: &str = "seed,output_l1,mean_block_l1";
pub const LOSSES_HEADER: &str = "iter,loss";
pub const FLOPS_RATES_HEADER: &str = "rate,flops,relative_to_softmax";
pub const FLOPS_GRID_HEADER: &str = "config,total_flops,baseline_flops,reduction_pct,asymptotic_pct";

/// Finetuning data stream label under the finetune seed.
const FINETUNE_DATA_STREAM: u64 = 10;

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::output(dir, e))?;
    let probe = dir.join(".write-probe");
    std::fs::write(&probe, b"").map_err(|e| CliError::output(dir, e))?;
    std::fs::remove_file(&probe).map_err(|e| CliError::output(&probe, e))?;
    Ok(())
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::output(path, e))
}

/// Routes I/O failures of a core save to the output exit code.
fn saved(path: &Path, r: attn_surgery::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| match e {
        Error::Io(io) => CliError::output(path, io),
        e => e.into(),
    })
}

fn to_json<T: serde::Serialize>(value: &T) -> Result<String, CliError> {
    Ok(serde_json::to_string_pretty(value).map_err(Error::from)? + "\n")
}

fn read_input(path: &Path) -> Result<String, CliError> {
    std::fs::read_to_string(path).map_err(|e| {
        CliError::Core(Error::Argument(format!(
            "cannot read {} ({e}); run the earlier stage first",
            path.display()
        )))
    })
}

fn obtain_teacher(cfg: &PipelineConfig) -> Result<ToyModel, CliError> {
    let t = &cfg.teacher;
    let teacher = match t.source {
        TeacherSource::File => {
            let path = t.path.as_ref().expect("validated");
            let model = ToyModel::load(path)?;
            if model.dims != cfg.model {
                return Err(CliError::Config(format!(
                    "teacher {} has dims {:?}, config has {:?}",
                    path.display(),
                    model.dims,
                    cfg.model
                )));
            }
            model
        }
        TeacherSource::FrozenRandom => ToyModel::frozen_random(cfg.model, t.seed, t.qk_gain)?,
        TeacherSource::Trained => {
            let init = ToyModel::frozen_random(cfg.model, t.seed, 1.0)?;
            let data = generate_synthetic(&mut SeededRng::derived(t.seed, &[1]), t.samples, &cfg.model)?;
            let train = TrainConfig {
                iters: t.iters,
                lr: t.lr,
                batch: t.batch,
                seed: t.seed,
            };
            train_teacher(&init, &data, &train)?.model
        }
    };
    if !teacher.is_all_softmax() {
        return Err(CliError::Config("teacher must be an all-softmax model".into()));
    }
    Ok(teacher)
}

fn load_model(path: &Path, stage: &str) -> Result<ToyModel, CliError> {
    if !path.exists() {
        return Err(CliError::Core(Error::Argument(format!(
            "{} not found; run `{stage}` first",
            path.display()
        ))));
    }
    Ok(ToyModel::load(path)?)
}

fn load_teacher(out: &Path) -> Result<ToyModel, CliError> {
    load_model(&out.join(TEACHER_FILE), "distill")
}

pub fn distill(cfg: &PipelineConfig, jobs: usize) -> Result<String, CliError> {
    prepare_out(&cfg.out)?;
    let teacher = obtain_teacher(cfg)?;
    let teacher_path = cfg.out.join(TEACHER_FILE);
    let metadata = json!({ "source": format!("{:?}", cfg.teacher.source), "seed": cfg.teacher.seed });
    saved(&teacher_path, teacher.save(&teacher_path, metadata))?;

    let run = build_error_table(&teacher, &cfg.rates, &cfg.distill, jobs)?;
    let ckpt_dir = cfg.out.join(CHECKPOINT_DIR);
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| CliError::output(&ckpt_dir, e))?;
    for (&(block, rate), pair) in &run.checkpoints {
        let path = ckpt_dir.join(checkpoint_name(block, rate));
        saved(&path, save_feature_checkpoint(&path, pair, block, rate))?;
    }
    let table_path = cfg.out.join(ERRORS_FILE);
    saved(&table_path, run.table.save(&table_path))?;

    let mut csv = format!("{DISTILL_HEADER}\n");
    let mut diverged = Vec::new();
    for b in 0..run.table.blocks {
        for (c, &r) in run.table.rates.iter().enumerate() {
            let updates = run.outcomes.get(&(b, r)).map_or(0, |o| o.updates);
            let (init, fin) = (run.table.metadata.initial[b][c], run.table.errors[b][c]);
            if fin.is_infinite() {
                diverged.push((b, r));
            }
            writeln!(csv, "{b},{r},{init},{fin},{updates}").unwrap();
        }
    }
    write(&cfg.out.join(DISTILL_CSV), &csv)?;
    if let Some(&(block, rate)) = diverged.first() {
        return Err(CliError::Core(Error::Divergence {
            context: format!(
                "distillation of {} (block, rate) pair(s), first block {block} rate {rate}; table written with null entries",
                diverged.len()
            ),
            loss: f64::INFINITY,
            update: 0,
        }));
    }
    Ok(csv)
}

fn budget_for(cfg: &PipelineConfig, costs: &CostTable, flag: Option<f64>) -> Result<Budget, CliError> {
    let beta = match (flag, cfg.plan.budget, cfg.plan.budget_fraction) {
        (Some(b), _, _) | (None, Some(b), _) => b,
        (None, None, Some(f)) => f * costs.costs.iter().map(|row| row[0]).sum::<f64>(),
        (None, None, None) => return Err(CliError::Config("no budget given".into())),
    };
    let budget = match cfg.plan.granularity {
        Some(g) => Budget::with_granularity(beta, g),
        None => Budget::new(beta),
    };
    budget.map_err(|e| CliError::Config(e.to_string()))
}

pub fn plan(cfg: &PipelineConfig, budget_flag: Option<f64>) -> Result<String, CliError> {
    prepare_out(&cfg.out)?;
    let errors_path = cfg.out.join(ERRORS_FILE);
    if !errors_path.exists() {
        return Err(CliError::Core(Error::Argument(format!(
            "{} not found; run `distill` first",
            errors_path.display()
        ))));
    }
    let errors = ErrorTable::load(&errors_path)?;
    if !errors.rates.contains(&1) {
        return Err(CliError::Core(Error::Argument("error table lacks rate 1".into())));
    }
    let costs = build_cost_table(&cfg.cost_dims(), &errors.rates, errors.blocks)?;
    let plan = match cfg.plan.mode {
        PlanMode::Mckp => solve_mckp(&errors, &costs, &budget_for(cfg, &costs, budget_flag)?)?,
        PlanMode::Homogeneous => {
            let (k, rate) = (cfg.plan.k.expect("validated"), cfg.plan.rate.expect("validated"));
            homogeneous_select(&errors, &costs, rate, k)?
        }
    };
    let costs_path = cfg.out.join(COSTS_FILE);
    write(&costs_path, &to_json(&costs)?)?;
    write(&cfg.out.join(PLAN_FILE), &to_json(&plan)?)?;
    let label = match cfg.plan.mode {
        PlanMode::Mckp => "mckp".to_string(),
        PlanMode::Homogeneous => format!("{}xR{}", cfg.plan.k.unwrap_or(0), cfg.plan.rate.unwrap_or(1)),
    };
    let report = reduction_report(&label, &plan.rates, &costs.dims)?;
    let csv = ReductionReport::to_csv(&[report]);
    write(&cfg.out.join(PLAN_CSV), &csv)?;
    Ok(csv)
}

fn load_plan(out: &Path) -> Result<RatePlan, CliError> {
    let path = out.join(PLAN_FILE);
    let text = read_input(&path)?;
    serde_json::from_str(&text).map_err(|e| {
        CliError::Core(Error::Format {
            path: path.clone(),
            reason: e.to_string(),
        })
    })
}

fn load_checkpoints(out: &Path, plan: &RatePlan) -> Result<BTreeMap<(usize, usize), FeatureMapPair>, CliError> {
    let mut map = BTreeMap::new();
    for (block, &rate) in plan.rates.iter().enumerate() {
        if rate == 1 {
            continue;
        }
        let path: PathBuf = out.join(CHECKPOINT_DIR).join(checkpoint_name(block, rate));
        if !path.exists() {
            return Err(CliError::Core(Error::MissingCheckpoint { block, rate }));
        }
        let (b, r, pair) = load_feature_checkpoint(&path)?;
        if (b, r) != (block, rate) {
            return Err(CliError::Core(Error::Format {
                path,
                reason: format!("holds block {b} rate {r}"),
            }));
        }
        map.insert((block, rate), pair);
    }
    Ok(map)
}

fn assembled(cfg: &PipelineConfig, teacher: &ToyModel) -> Result<ToyModel, CliError> {
    let plan = load_plan(&cfg.out)?;
    let checkpoints = load_checkpoints(&cfg.out, &plan)?;
    Ok(assemble_student(teacher, &plan, &checkpoints, cfg.distill.mode)?)
}

fn mean_blocks(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn fidelity_rows(csv: &mut String, prefix: &str, report: &FidelityReport) {
    for s in &report.per_seed {
        writeln!(csv, "{prefix}{},{},{}", s.seed, s.output_l1, mean_blocks(&s.block_l1)).unwrap();
    }
    let mut sorted: Vec<f64> = report.per_seed.iter().map(|s| mean_blocks(&s.block_l1)).collect();
    sorted.sort_by(f64::total_cmp);
    let mid = sorted.len() / 2;
    let median_block = if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    };
    let mean_block = mean_blocks(&report.mean_block_l1);
    writeln!(csv, "{prefix}mean,{},{mean_block}", report.mean_output_l1).unwrap();
    writeln!(csv, "{prefix}median,{},{median_block}", report.median_output_l1).unwrap();
}

pub fn finetune(cfg: &PipelineConfig) -> Result<String, CliError> {
    prepare_out(&cfg.out)?;
    let teacher = load_teacher(&cfg.out)?;
    let student = assembled(cfg, &teacher)?;
    let before = evaluate_fidelity(&student, &teacher, &cfg.eval.seeds)?;

    let f = &cfg.finetune;
    let mut rng = SeededRng::derived(f.seed, &[FINETUNE_DATA_STREAM]);
    let mut data = generate_synthetic(&mut rng, f.samples, &teacher.dims)?;
    if f.teacher_labels {
        data = teacher_labelled(&teacher, &data)?;
    }
    let outcome = finetune_student(&student, &data, &f.train_config())?;
    let after = evaluate_fidelity(&outcome.model, &teacher, &cfg.eval.seeds)?;

    let student_path = cfg.out.join(STUDENT_FILE);
    let metadata = json!({ "finetune_seed": f.seed, "iters": f.iters, "lr": f.lr });
    saved(&student_path, outcome.model.save(&student_path, metadata))?;
    let mut losses = format!("{LOSSES_HEADER}\n");
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(losses, "{i},{l}").unwrap();
    }
    write(&cfg.out.join(LOSSES_CSV), &losses)?;

    let mut csv = format!("{FINETUNE_HEADER}\n");
    fidelity_rows(&mut csv, "before,", &before);
    fidelity_rows(&mut csv, "after,", &after);
    write(&cfg.out.join(FINETUNE_CSV), &csv)?;
    Ok(csv)
}

pub fn eval(cfg: &PipelineConfig) -> Result<String, CliError> {
    prepare_out(&cfg.out)?;
    let teacher = load_teacher(&cfg.out)?;
    let student = match cfg.eval.model {
        EvalModel::Assembled => assembled(cfg, &teacher)?,
        EvalModel::Finetuned => load_model(&cfg.out.join(STUDENT_FILE), "finetune")?,
    };
    let report = evaluate_fidelity(&student, &teacher, &cfg.eval.seeds)?;
    let mut csv = format!("{EVAL_HEADER}\n");
    fidelity_rows(&mut csv, "", &report);
    write(&cfg.out.join(EVAL_CSV), &csv)?;
    Ok(csv)
}

pub fn flops(cfg: &PipelineConfig) -> Result<String, CliError> {
    prepare_out(&cfg.out)?;
    let dims = cfg.flops.dims();
    let softmax = flops_at_rate(1, &dims);
    let mut rates_csv = format!("{FLOPS_RATES_HEADER}\n");
    for &r in &cfg.rates {
        let c = flops_at_rate(r, &dims);
        writeln!(rates_csv, "{r},{c},{:.6}", c / softmax).unwrap();
    }
    let mut grid_csv = format!("{FLOPS_GRID_HEADER}\n");
    for (name, rates) in standard_grid(cfg.flops.blocks) {
        let r = reduction_report(&name, &rates, &dims)?;
        writeln!(grid_csv, "{},{:.6}", r.csv_row(), r.asymptotic_pct).unwrap();
    }
    write(&cfg.out.join(FLOPS_RATES_CSV), &rates_csv)?;
    write(&cfg.out.join(FLOPS_GRID_CSV), &grid_csv)?;
    Ok(format!("{rates_csv}\n{grid_csv}"))
}
