use clap::Parser;
use scenepos_cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let out = run(cli)?;
    println!("{}", serde_json::to_string_pretty(&out)?);
    Ok(())
}
