fn main() {
    std::process::exit(charcom_harness::cli::main_with(std::env::args_os()));
}
