fn main() {
    std::process::exit(fda::cli::dispatch(std::env::args_os()));
}
