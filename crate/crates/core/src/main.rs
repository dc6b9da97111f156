fn main() {
    std::process::exit(dqweight::cli::main_with_args(std::env::args_os()));
}
