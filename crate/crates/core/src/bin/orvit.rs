fn main() {
    std::process::exit(orvit::cli::dispatch(std::env::args_os()));
}
