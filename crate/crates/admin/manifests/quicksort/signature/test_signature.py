import unittest

from quicksort import quicksort


class SignatureTest(unittest.TestCase):
    def test_returns_a_list(self):
        self.assertIsInstance(quicksort([2, 1]), list)
