import unittest

import numpy as np

from tests.helpers import canned
from ucmask.instance import DailySchedule, HistoryBank, HistoryDay
from ucmask.mask import MaskEntry
from ucmask.maskgen import prompt
from ucmask.maskgen.prompt import ResponseParseError, ResponseSchemaError, ResponseSemanticError

# (reply, expected error) against the small instance with K = 1
ADVERSARIAL = [
    ("", ResponseParseError),
    ("not json at all", ResponseParseError),
    ('Here is the mask: [[1, "g1", 1]]', ResponseParseError),
    ('```json\n[[1, "g1", 1]]\n```', ResponseParseError),
    ('[[1, "g1", 1]] hope this helps', ResponseParseError),
    ('[[1, "g1", 1]', ResponseParseError),
    ("[NaN]", ResponseParseError),
    ('{"t": 1, "g": "g1", "u": 1}', ResponseSchemaError),
    ("42", ResponseSchemaError),
    ('[[1, "g1"]]', ResponseSchemaError),
    ('[[1, "g1", 1, 0]]', ResponseSchemaError),
    ('[["1", "g1", 1]]', ResponseSchemaError),
    ('[[1.0, "g1", 1]]', ResponseSchemaError),
    ('[[1, 1, 1]]', ResponseSchemaError),
    ('[[true, "g1", 1]]', ResponseSchemaError),
    ('[{"t": 1, "g": "g1", "u": 1}]', ResponseSchemaError),
    ('[[1, "g9", 1]]', ResponseSemanticError),
    ('[[0, "g1", 1]]', ResponseSemanticError),
    ('[[7, "g1", 1]]', ResponseSemanticError),
    ('[[1, "g1", 2]]', ResponseSemanticError),
    ('[[1, "g1", 1], [1, "g1", 0]]', ResponseSemanticError),
    ('[[1, "g1", 1], [1, "g2", 1]]', ResponseSemanticError),
]


def _history(inst) -> HistoryBank:
    u = np.array([[1] * 6, [0, 0, 1, 1, 0, 0], [0] * 6])
    days = tuple(
        HistoryDay(profile=inst.total_demand() + shift, schedule=DailySchedule(u=u, p=u * 10.0))
        for shift in (0.0, 5.0, 50.0)
    )
    return HistoryBank(days)


class ParseResponseTest(unittest.TestCase):
    def test_adversarial_replies_are_classified(self):
        inst = canned("small")
        for reply, expected in ADVERSARIAL:
            with self.subTest(reply=reply):
                with self.assertRaises(expected):
                    prompt.parse_llm_response(reply, inst, k_cap=1)

    def test_error_classes_are_distinct(self):
        self.assertFalse(issubclass(ResponseParseError, ResponseSchemaError))
        self.assertFalse(issubclass(ResponseSchemaError, ResponseSemanticError))
        self.assertTrue(issubclass(ResponseSemanticError, prompt.ResponseError))

    def test_valid_reply_with_whitespace(self):
        inst = canned("small")
        mask = prompt.parse_llm_response(' \n[[2, "g2", 0], [1, "g1", 1]]\n', inst, k_cap=1)
        self.assertEqual(mask.entries, (MaskEntry(1, "g1", 1), MaskEntry(2, "g2", 0)))
        self.assertEqual(mask.provenance, "llm")
        self.assertEqual(mask.k_cap, 1)

    def test_empty_array_is_a_valid_mask(self):
        self.assertEqual(len(prompt.parse_llm_response("[]", canned("small"), k_cap=1)), 0)


class BuildPromptTest(unittest.TestCase):
    def test_sections_in_order(self):
        inst = canned("small")
        doc = prompt.build_llm_prompt(inst, _history(inst), H=2, k_cap=1)
        positions = [
            doc.text.index(header)
            for header in ("## Task", "## Input Data", "## Output Format", "## Restriction Guidelines")
        ]
        self.assertEqual(positions, sorted(positions))
        self.assertEqual(doc.reference_days, 2)
        self.assertIn("Day 2 commitment", doc.text)
        self.assertNotIn("Day 3", doc.text)

    def test_guidelines_carry_the_cap(self):
        inst = canned("small")
        doc = prompt.build_llm_prompt(inst, HistoryBank(), H=3, k_cap=2)
        self.assertIn("fix at most 2 units", doc.guidelines)
        self.assertTrue(doc.guidelines.startswith("1. "))
        self.assertEqual(doc.reference_days, 0)
        self.assertNotIn("Reference days", doc.text)

    def test_network_and_ramp_data_stay_out(self):
        inst = canned("small")
        text = prompt.build_llm_prompt(inst, _history(inst), H=3, k_cap=1).text
        for hidden in ("f_max", "r_hr", "r_su", "ref_bus"):
            self.assertNotIn(hidden, text)
        self.assertIn('"min_up": 3', text)
        self.assertIn("[60.0, 75.0, 100.0, 125.0, 110.0, 80.0]", text)

    def test_single_user_message(self):
        doc = prompt.build_llm_prompt(canned("tiny"), HistoryBank(), H=3, k_cap=1)
        messages = doc.messages()
        self.assertEqual(len(messages), 1)
        self.assertEqual(messages[0]["role"], "user")
        self.assertEqual(messages[0]["content"], doc.text)

    def test_revision_request(self):
        text = prompt.revision_request("- capacity (hour 1): short", 2)
        self.assertTrue(text.startswith("- capacity"))
        self.assertIn("Fix at most 2 units per hour.", text)


if __name__ == "__main__":  # pragma: no cover
    unittest.main()
