fn main() {
    std::process::exit(duocontrast::cli::dispatch(std::env::args_os()));
}
