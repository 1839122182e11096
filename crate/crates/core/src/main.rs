fn main() {
    std::process::exit(metaperturb::cli::main_with_args(std::env::args_os()));
}
