fn main() {
    let outcome = geld::cli::run_command(std::env::args_os());
    std::process::exit(outcome.code);
}
