fn main() {
    std::process::exit(colorsense::cli::run(std::env::args_os()));
}
