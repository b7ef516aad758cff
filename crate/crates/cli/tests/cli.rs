use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use attn_surgery::distill::ErrorTable;
use attn_surgery::planner::{brute_force_mckp, lowest_error_blocks, Budget, CostTable, RatePlan};

const TINY: &str = r#"
version = 1
rates = [1, 2, 4]

[model]
blocks = 3
tokens = 16
width = 8
heads = 2
head_dim = 4
value_dim = 4
ffn_hidden = 16
timesteps = 2

[teacher]
source = "trained"
iters = 30
samples = 8

[distill]
timesteps = [1, 2]
train_samples = 2
heldout_samples = 1
max_updates = 20

[plan]
budget_fraction = 0.8
cost_tokens = 4096

[finetune]
iters = 10
samples = 8

[eval]
seeds = [1, 2]
"#;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_attn-surgery"))
}

struct Run {
    dir: tempfile::TempDir,
}

impl Run {
    fn new(config: &str) -> Self {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("cfg.toml"), config).unwrap();
        Self { dir }
    }

    fn out(&self) -> PathBuf {
        self.dir.path().join("out")
    }

    fn cmd(&self, sub: &str, extra: &[&str]) -> Output {
        let mut c = bin();
        c.arg(sub)
            .arg("--config")
            .arg(self.dir.path().join("cfg.toml"))
            .arg("--out")
            .arg(self.out());
        if !extra.contains(&"--jobs") {
            c.args(["--jobs", "2"]);
        }
        c.args(extra).output().unwrap()
    }

    fn ok(&self, sub: &str, extra: &[&str]) -> String {
        let o = self.cmd(sub, extra);
        assert!(o.status.success(), "{sub}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8(o.stdout).unwrap()
    }

    fn read(&self, name: &str) -> String {
        std::fs::read_to_string(self.out().join(name)).unwrap()
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn csv_value(csv: &str, key: &str, column: usize) -> f64 {
    csv.lines()
        .find(|l| l.starts_with(key))
        .unwrap_or_else(|| panic!("no row {key} in\n{csv}"))
        .split(',')
        .nth(column)
        .unwrap()
        .parse()
        .unwrap()
}

fn load_tables(out: &Path) -> (ErrorTable, CostTable) {
    let errors = ErrorTable::load(&out.join("errors.json")).unwrap();
    let costs = serde_json::from_str(&std::fs::read_to_string(out.join("costs.json")).unwrap()).unwrap();
    (errors, costs)
}

fn load_plan(out: &Path) -> RatePlan {
    serde_json::from_str(&std::fs::read_to_string(out.join("plan.json")).unwrap()).unwrap()
}

#[test]
fn flops_report_without_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = bin().arg("flops").arg("--out").arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.starts_with("rate,flops,relative_to_softmax\n1,"));
    assert_eq!(csv_value(&stdout, "1,", 2), 1.0);
    assert!(stdout.contains("config,total_flops,baseline_flops,reduction_pct,asymptotic_pct\n"));
    assert_eq!(csv_value(&stdout, "15xR4,", 4), 37.5);
    let best = stdout
        .lines()
        .filter(|l| l.contains("xR"))
        .map(|l| l.split(',').nth(3).unwrap().parse::<f64>().unwrap())
        .fold(0.0, f64::max);
    assert!(best >= 40.0);
    let grid = std::fs::read_to_string(dir.path().join("flops_grid.csv")).unwrap();
    assert!(stdout.ends_with(&grid));
}

#[test]
fn distill_writes_table_and_is_reproducible() {
    let run = Run::new(TINY);
    let report = run.ok("distill", &[]);
    assert!(report.starts_with("block,rate,initial_error,final_error,updates\n"));
    let table = ErrorTable::load(&run.out().join("errors.json")).unwrap();
    assert_eq!(table.errors.len(), 3);
    assert!(table.errors.iter().all(|r| r.len() == 3 && r[0] == 0.0));
    let ckpts = std::fs::read_dir(run.out().join("checkpoints")).unwrap().count();
    assert_eq!(ckpts, 6);

    let names = ["errors.json", "distill_report.csv", "teacher.bin", "checkpoints/phi_b002_r4.bin"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| std::fs::read(run.out().join(n)).unwrap()).collect();
    run.ok("distill", &["--jobs", "1"]);
    for (n, bytes) in names.iter().zip(first) {
        assert_eq!(std::fs::read(run.out().join(n)).unwrap(), bytes, "{n} changed");
    }
}

#[test]
fn config_errors_exit_2() {
    let run = Run::new("version = 1\nunknown_key = 3\n");
    let o = run.cmd("distill", &[]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown_key"));
    assert!(o.stdout.is_empty());

    let run = Run::new("version = 9\n");
    assert_eq!(code(&run.cmd("plan", &[])), 2);

    let o = bin().arg("distill").output().unwrap();
    assert_eq!(code(&o), 2);
    let o = bin().arg("nonsense").output().unwrap();
    assert_eq!(code(&o), 2);
}

#[test]
fn unwritable_output_exits_4() {
    let run = Run::new(TINY);
    let blocker = run.dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = bin()
        .args(["flops", "--out"])
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
    let o = bin()
        .arg("distill")
        .arg("--config")
        .arg(run.dir.path().join("cfg.toml"))
        .arg("--out")
        .arg(blocker.join("sub"))
        .output()
        .unwrap();
    assert_eq!(code(&o), 4);
}

#[test]
fn missing_output_dir_is_created() {
    let run = Run::new(TINY);
    let nested = run.dir.path().join("a/b/c");
    let o = bin().args(["flops", "--out"]).arg(&nested).output().unwrap();
    assert!(o.status.success());
    assert!(nested.join("flops_rates.csv").exists());
}

#[test]
fn divergence_exits_3() {
    let cfg = TINY.replace("max_updates = 20", "max_updates = 20\nlr = 1e200\nloss = \"attention\"\ntolerance = 0.0");
    let run = Run::new(&cfg);
    let o = run.cmd("distill", &[]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(run.read("errors.json").contains("null"));
}

#[test]
fn plan_budgets() {
    let run = Run::new(TINY);
    run.ok("distill", &[]);

    let csv = run.ok("plan", &["--budget", "1e30"]);
    assert!(csv.starts_with("config,total_flops,baseline_flops,reduction_pct\n"));
    assert_eq!(csv_value(&csv, "mckp,", 3), 0.0);
    assert_eq!(load_plan(&run.out()).rates, vec![1, 1, 1]);

    let o = run.cmd("plan", &["--budget", "1"]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("minimal achievable cost"));

    run.ok("plan", &[]);
    let (errors, costs) = load_tables(&run.out());
    let softmax: f64 = costs.costs.iter().map(|r| r[0]).sum();
    let oracle = brute_force_mckp(&errors, &costs, &Budget::new(0.8 * softmax).unwrap()).unwrap();
    let plan = load_plan(&run.out());
    assert_eq!(plan.objective, oracle.objective);
    assert_eq!(plan.rates, oracle.rates);
    assert_eq!(run.read("plan_report.csv"), run.ok("plan", &[]));
}

#[test]
fn homogeneous_plan_matches_sorting_oracle() {
    let cfg = TINY.replace("budget_fraction = 0.8", "mode = \"homogeneous\"\nk = 2\nrate = 4");
    let run = Run::new(&cfg);
    run.ok("distill", &[]);
    let csv = run.ok("plan", &[]);
    assert!(csv.contains("2xR4,"));
    let (errors, _) = load_tables(&run.out());
    let chosen = lowest_error_blocks(&errors.column(4).unwrap(), 2).unwrap();
    let plan = load_plan(&run.out());
    for (b, &r) in plan.rates.iter().enumerate() {
        assert_eq!(r, if chosen.contains(&b) { 4 } else { 1 });
    }
}

#[test]
fn finetune_and_eval() {
    let run = Run::new(TINY);
    run.ok("distill", &[]);
    run.ok("plan", &["--budget", "1e30"]);
    let eval = run.ok("eval", &[]);
    assert!(eval.starts_with("seed,output_l1,mean_block_l1\n"));
    assert_eq!(csv_value(&eval, "mean,", 1), 0.0);
    assert_eq!(csv_value(&eval, "1,", 1), 0.0);

    run.ok("plan", &[]);
    assert_ne!(load_plan(&run.out()).rates, vec![1, 1, 1]);
    let ft = run.ok("finetune", &[]);
    assert!(ft.starts_with("stage,seed,output_l1,mean_block_l1\n"));
    assert!(csv_value(&ft, "after,mean,", 2) <= csv_value(&ft, "before,mean,", 2));
    assert_eq!(ft, run.read("finetune_metrics.csv"));
    let eval = run.ok("eval", &[]);
    assert_eq!(csv_value(&eval, "mean,", 1), csv_value(&ft, "before,mean,", 2));

    let finetuned = TINY.replace("seeds = [1, 2]", "seeds = [1, 2]\nmodel = \"finetuned\"");
    std::fs::write(run.dir.path().join("cfg.toml"), finetuned).unwrap();
    let eval = run.ok("eval", &[]);
    assert_eq!(csv_value(&eval, "mean,", 1), csv_value(&ft, "after,mean,", 2));
}

#[test]
fn missing_checkpoint_exits_6() {
    let run = Run::new(TINY);
    run.ok("distill", &[]);
    run.ok("plan", &[]);
    let plan = load_plan(&run.out());
    let (b, r) = plan.rates.iter().enumerate().find(|(_, &r)| r > 1).map(|(b, &r)| (b, r)).unwrap();
    std::fs::remove_file(run.out().join(format!("checkpoints/phi_b{b:03}_r{r}.bin"))).unwrap();
    assert_eq!(code(&run.cmd("finetune", &[])), 6);
    assert_eq!(code(&run.cmd("eval", &[])), 6);
}

#[test]
fn seed_flag_changes_results() {
    let run = Run::new(TINY);
    run.ok("distill", &[]);
    let a = run.read("errors.json");
    run.ok("distill", &["--seed", "17"]);
    assert_ne!(a, run.read("errors.json"));
}
