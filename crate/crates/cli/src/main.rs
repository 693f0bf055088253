fn main() {
    std::process::exit(msfilter_cli::run(std::env::args_os()));
}
