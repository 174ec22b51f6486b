use clap::Parser;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    // Parse once just for the verbosity flag; `run` reports parse errors.
    let level = match prme::cli::Cli::try_parse_from(&args).map(|c| c.verbose).unwrap_or(0) {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let mut stdout = std::io::stdout().lock();
    std::process::exit(prme::cli::run(args, &mut stdout));
}
