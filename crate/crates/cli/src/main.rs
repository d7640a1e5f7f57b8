fn main() {
    std::process::exit(debtrank_cli::run(std::env::args_os()));
}
