fn main() { println!("usc"); }
