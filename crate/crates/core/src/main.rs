fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(rankloss::cli::run_command(&argv));
}
