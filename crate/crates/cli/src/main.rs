fn main() {
    std::process::exit(mview_cli::main_with_args(std::env::args_os()));
}
