fn main() {
    std::process::exit(ssm_cli::run(std::env::args_os()));
}
