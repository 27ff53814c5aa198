fn main() {
    let code = std::panic::catch_unwind(|| austkit::cli::run(std::env::args_os()))
        .unwrap_or(austkit::cli::EXIT_INTERNAL);
    std::process::exit(code);
}
