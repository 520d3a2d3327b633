fn main() {
    std::process::exit(dyecav::cli::main_from(std::env::args_os()));
}
