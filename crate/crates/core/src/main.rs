fn main() {
    std::process::exit(nlekit::cli::dispatch(std::env::args_os()));
}
