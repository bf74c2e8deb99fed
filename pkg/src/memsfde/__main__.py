from memsfde.cli import console_main

console_main()
