fn main() {
    let args: Vec<String> = std::env::args().collect();
    std::process::exit(cemformer_cli::run(&args));
}
