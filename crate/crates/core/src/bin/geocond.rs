fn main() {
    std::process::exit(geocond::cli::dispatch(std::env::args_os()));
}
