// Doctest harness for the guide chapters; filled in with the book.
