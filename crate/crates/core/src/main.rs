fn main() {
    std::process::exit(imm::cli::main_with_args(std::env::args_os()));
}
