fn main() {
    println!("duovis");
}
