use clap::Parser;

use canonedit::cli::{run, Cli};

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let manifest = run(&cli)?;
    println!(
        "{}: wrote {} files to {}",
        manifest.command,
        manifest.artifacts.len() + 1,
        cli.command.args().out.display()
    );
    Ok(())
}
