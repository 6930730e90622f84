use clap::Parser;

fn main() {
    // MAGNET_LOG: error, warn, info (default), debug or trace
    let level = std::env::var("MAGNET_LOG")
        .ok()
        .and_then(|l| l.parse().ok())
        .unwrap_or(tracing::Level::INFO);
    tracing_subscriber::fmt().with_max_level(level).with_writer(std::io::stderr).init();
    let cli = magnet_service::cli::Cli::parse();
    if let Err(e) = magnet_service::cli::run(cli) {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
