fn main() {
    std::process::exit(e2ediff::harness::run_cli(std::env::args_os()));
}
