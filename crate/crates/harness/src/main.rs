fn main() {
    std::process::exit(xbar_harness::cli::main_with(std::env::args_os()));
}
