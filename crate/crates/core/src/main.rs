fn main() {
    std::process::exit(sanet::cli::run(std::env::args_os()));
}
