fn main() {
    let outcome = delaystab::cli::run(std::env::args_os());
    println!("{}", outcome.payload.trim_end());
    std::process::exit(outcome.exit_code);
}
