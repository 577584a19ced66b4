import unittest

from lap.database import Database, Metric, Run


class TestDatabase(unittest.TestCase):

    def setUp(self):
        self.db = Database('sqlite://')

    def test_record_run(self):
        run = self.db.record_run('synth', 3, {'seed': 3}, {'iou_top_scored': 0.5, 'test_accuracy': 1,
                                                           'note': 'skipped'})
        self.assertEqual(run.as_dict(), {'iou_top_scored': 0.5, 'test_accuracy': 1.0})
        stored = self.db.runs('synth')
        self.assertEqual(len(stored), 1)
        self.assertEqual(stored[0].config, {'seed': 3})
        self.assertEqual(stored[0].seed, 3)
        self.assertEqual(self.db.session.query(Metric).count(), 2)

    def test_runs_filter(self):
        self.db.record_run('a', 0, {}, {'x': 1.0})
        self.db.record_run('b', 0, {}, {'x': 2.0}, commit=False)
        self.db.save()
        self.assertEqual([r.name for r in self.db.runs()], ['a', 'b'])
        self.assertEqual(self.db.runs('b')[0].as_dict(), {'x': 2.0})
        self.assertEqual(self.db.session.query(Run).count(), 2)


if __name__ == '__main__':
    unittest.main()
