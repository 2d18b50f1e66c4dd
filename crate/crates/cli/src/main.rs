use clap::Parser;

fn main() -> anyhow::Result<()> {
    let cli = iospe_cli::Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if cli.verbose { "debug" } else { "info" }))
        .init();
    iospe_cli::run(cli)
}
