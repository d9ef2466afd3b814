fn main() {
    let code = misreport::cli::run(std::env::args_os());
    std::process::exit(code);
}
