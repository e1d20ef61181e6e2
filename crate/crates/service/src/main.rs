use tracing_subscriber::EnvFilter;

fn main() {
    let filter = EnvFilter::try_from_env("EHRNAV_LOG").unwrap_or_else(|_| EnvFilter::new("warn,ehrnav_service=info"));
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    std::process::exit(ehrnav_service::cli::main());
}
