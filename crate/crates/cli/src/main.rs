fn main() {
    std::process::exit(st_align_cli::main_with_args(std::env::args_os()));
}
