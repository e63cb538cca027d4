fn main() {
    std::process::exit(ssmg_harness::cli::run(std::env::args_os()));
}
