fn main() { std::process::exit(posg::cli::main()) }
