fn main() {
    std::process::exit(concept_ident::cli::main_with_args(std::env::args_os()));
}
