import unittest

from quicksort import quicksort


class ExamplesTest(unittest.TestCase):
    def test_empty(self):
        self.assertEqual(quicksort([]), [])

    def test_duplicates_are_kept(self):
        self.assertEqual(quicksort([3, 1, 3, 2]), [1, 2, 3, 3])

    def test_input_is_not_modified(self):
        items = [2, 1]
        quicksort(items)
        self.assertEqual(items, [2, 1])
