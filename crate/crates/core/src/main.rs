fn main() {
    std::process::exit(orthomom::cli::main(std::env::args_os()));
}
