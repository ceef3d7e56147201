fn main() {
    let argv: Vec<String> = std::env::args().collect();
    std::process::exit(flowr_cli::run(argv));
}
