"""Reference model programs in VM assembly."""


def sgd_linreg(rate: float = 0.05) -> str:
    """One SGD step per record on squared error: w <- w - rate * (w.x - y) * x.

    ``_y`` is transaction scratch and is excluded from parameter snapshots.
    """
    return f"""\
INPUT 16        ; push x, y or jump to HALT once drained
BEGIN
STORE _y
DUP
LOAD w
DOT             ; x, w.x
LOAD _y
SUB             ; x, err
CONST {-rate!r}
MUL
VSCALE
LOAD w
VADD
STORE w
COMMIT
JMP 0
HALT
"""


# emits w.x for every input record
LINEAR_QUERY = """\
INPUT 8
POP
BEGIN
LOAD w
ABORT
DOT
EMIT
JMP 0
HALT
"""

LOGISTIC_QUERY = """\
INPUT 9
POP
BEGIN
LOAD w
ABORT
DOT
SIGMOID
EMIT
JMP 0
HALT
"""

# order-insensitive aggregate: running sum and count of labels
AVERAGE = """\
INPUT 13
SWAP
POP
BEGIN
LOAD sum
ADD
STORE sum
LOAD n
CONST 1
ADD
STORE n
COMMIT
JMP 0
HALT
"""

# a training program that tries to leak its first label
LEAKY_TRAINING = """\
INPUT 3
EMIT
JMP 0
HALT
"""
