//! The `gyro` commands driven from code: generate, train, evaluate, verify.

use app2s::cli::{run_command, Command, RunConfig};

fn main() -> Result<(), app2s::cli::CliError> {
    let out = std::env::temp_dir().join("app2s_cli_pipeline");
    let cfg = RunConfig {
        out: out.clone(),
        epochs: 1,
        tasks_per_epoch: 50,
        val_tasks: 10,
        eval_epochs: 1,
        eval_tasks: 50,
        lr: 0.01,
        temperature: 0.1,
        ..RunConfig::default()
    };
    print!("{}", run_command(Command::Gen, &cfg)?);
    let cfg = RunConfig {
        dataset: Some(out.join("dataset.bin")),
        ..cfg
    };
    print!("{}", run_command(Command::Train, &cfg)?);
    print!("{}", run_command(Command::Eval, &cfg)?);
    let report = run_command(Command::Verify, &cfg)?;
    println!("{}", report.lines().last().unwrap_or_default());
    println!("outputs in {}", out.display());
    Ok(())
}
