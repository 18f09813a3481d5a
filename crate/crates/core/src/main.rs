fn main() {
    std::process::exit(vqlcmd::cli::run_cli(std::env::args_os()));
}
