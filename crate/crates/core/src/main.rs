fn main() { std::process::exit(srcot::cli::run_cli(std::env::args_os())); }
