fn main() {
    std::process::exit(asd_cli::dispatch(std::env::args_os()));
}
