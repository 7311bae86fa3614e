//! Holds the `acceptance` test target, which checks the library and CLI
//! against the acceptance criteria and prints one line per criterion.
